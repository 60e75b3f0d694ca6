//! C ABI for the registration library. Objects cross the boundary as
//! opaque handles; every fallible call returns a status code and stores
//! its message for retrieval with `conreg_last_error_message`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::{c_char, size_t};

use conreg::basis::SineBasis;
use conreg::density::{q_map, q_unmap, DensityField, DomainSpec, SquareMatrix, Warp1D};
use conreg::error::Error;
use conreg::geometry::Grid1D;
use conreg::register::{invert_warp, register_pair_1d, RegistrationConfig};
use conreg::simulate::l2_warp_error;
use conreg::template::{full_pipeline, TemplateConfig};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ConregStatus {
    Ok = 0,
    /// invalid argument or malformed input data
    Validation = 1,
    /// a point left the mathematical domain of an operation
    Domain = 2,
    /// a candidate warp failed the diffeomorphism checks
    Diffeomorphism = 3,
    /// resource limit exceeded
    Resource = 4,
    /// an iteration failed to converge
    Convergence = 5,
    /// file system failure
    Io = 6,
    /// unreadable file contents
    Parse = 7,
    /// a null pointer was passed where an object is required
    NullPointer = 8,
    /// an internal invariant was violated
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(e: &Error) -> ConregStatus {
    match e {
        Error::Validation(_) => ConregStatus::Validation,
        Error::Domain(_) => ConregStatus::Domain,
        Error::Diffeomorphism(_) => ConregStatus::Diffeomorphism,
        Error::Resource(_) => ConregStatus::Resource,
        Error::Convergence(_) => ConregStatus::Convergence,
        Error::Io { .. } => ConregStatus::Io,
        Error::Parse { .. } => ConregStatus::Parse,
    }
}

/// Runs a closure, mapping library errors and panics onto status codes.
fn guarded(f: impl FnOnce() -> Result<ConregStatus, Error>) -> ConregStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(code)) => code,
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            ConregStatus::Panic
        }
    }
}

fn null_arg(name: &str) -> ConregStatus {
    set_error(&format!("{name} must not be null"));
    ConregStatus::NullPointer
}

/// A density on the unit square (opaque).
pub struct ConregDensity(DensityField);

/// A boundary-preserving reparameterization of the unit interval (opaque).
pub struct ConregWarp(Warp1D);

/// Message describing the most recent error on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn conreg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn path_from(ptr: *const c_char) -> Result<&'static Path, Error> {
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Error::Validation("path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

/// Builds a density from an `n`×`n` row-major table of non-negative
/// values on the uniform grid; the table is copied and normalized to
/// unit mass.
#[no_mangle]
pub unsafe extern "C" fn conreg_density_from_values(
    n: size_t,
    values: *const f64,
    out: *mut *mut ConregDensity,
) -> ConregStatus {
    if values.is_null() {
        return null_arg("values");
    }
    if out.is_null() {
        return null_arg("out");
    }
    guarded(|| {
        let data = std::slice::from_raw_parts(values, n * n).to_vec();
        let grid = Grid1D::uniform(n)?;
        let field = DensityField::from_unnormalized(
            DomainSpec::interval(grid),
            SquareMatrix::from_vec(n, data)?,
        )?;
        *out = Box::into_raw(Box::new(ConregDensity(field)));
        Ok(ConregStatus::Ok)
    })
}

/// Reads a density from a CSV file with its JSON sidecar.
#[no_mangle]
pub unsafe extern "C" fn conreg_density_read(
    path: *const c_char,
    out: *mut *mut ConregDensity,
) -> ConregStatus {
    if path.is_null() {
        return null_arg("path");
    }
    if out.is_null() {
        return null_arg("out");
    }
    guarded(|| {
        let field = conreg::io::read_density(path_from(path)?)?;
        *out = Box::into_raw(Box::new(ConregDensity(field)));
        Ok(ConregStatus::Ok)
    })
}

/// Writes a density as CSV plus a JSON sidecar.
#[no_mangle]
pub unsafe extern "C" fn conreg_density_write(
    density: *const ConregDensity,
    path: *const c_char,
) -> ConregStatus {
    if density.is_null() {
        return null_arg("density");
    }
    if path.is_null() {
        return null_arg("path");
    }
    guarded(|| {
        conreg::io::write_density(&(*density).0, path_from(path)?)?;
        Ok(ConregStatus::Ok)
    })
}

/// Grid size of a density (the value table is size×size).
#[no_mangle]
pub unsafe extern "C" fn conreg_density_size(density: *const ConregDensity) -> size_t {
    if density.is_null() {
        return 0;
    }
    (*density).0.values().size()
}

/// Copies the row-major value table into `out`, which must hold
/// size×size doubles.
#[no_mangle]
pub unsafe extern "C" fn conreg_density_values(
    density: *const ConregDensity,
    out: *mut f64,
) -> ConregStatus {
    if density.is_null() {
        return null_arg("density");
    }
    if out.is_null() {
        return null_arg("out");
    }
    let data = (*density).0.values().data();
    std::slice::from_raw_parts_mut(out, data.len()).copy_from_slice(data);
    ConregStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn conreg_density_free(density: *mut ConregDensity) {
    if !density.is_null() {
        drop(Box::from_raw(density));
    }
}

/// Reads a warp from its two-column CSV form.
#[no_mangle]
pub unsafe extern "C" fn conreg_warp_read(
    path: *const c_char,
    out: *mut *mut ConregWarp,
) -> ConregStatus {
    if path.is_null() {
        return null_arg("path");
    }
    if out.is_null() {
        return null_arg("out");
    }
    guarded(|| {
        let warp = conreg::io::read_warp_1d(path_from(path)?)?;
        *out = Box::into_raw(Box::new(ConregWarp(warp)));
        Ok(ConregStatus::Ok)
    })
}

#[no_mangle]
pub unsafe extern "C" fn conreg_warp_write(
    warp: *const ConregWarp,
    path: *const c_char,
) -> ConregStatus {
    if warp.is_null() {
        return null_arg("warp");
    }
    if path.is_null() {
        return null_arg("path");
    }
    guarded(|| {
        conreg::io::write_warp_1d(&(*warp).0, path_from(path)?)?;
        Ok(ConregStatus::Ok)
    })
}

/// Number of grid samples of a warp.
#[no_mangle]
pub unsafe extern "C" fn conreg_warp_size(warp: *const ConregWarp) -> size_t {
    if warp.is_null() {
        return 0;
    }
    (*warp).0.values().len()
}

/// Copies the warp's values on its grid into `out` (size doubles).
#[no_mangle]
pub unsafe extern "C" fn conreg_warp_values(
    warp: *const ConregWarp,
    out: *mut f64,
) -> ConregStatus {
    if warp.is_null() {
        return null_arg("warp");
    }
    if out.is_null() {
        return null_arg("out");
    }
    let vals = (*warp).0.values();
    std::slice::from_raw_parts_mut(out, vals.len()).copy_from_slice(vals);
    ConregStatus::Ok
}

/// Inverse of a warp.
#[no_mangle]
pub unsafe extern "C" fn conreg_warp_invert(
    warp: *const ConregWarp,
    out: *mut *mut ConregWarp,
) -> ConregStatus {
    if warp.is_null() {
        return null_arg("warp");
    }
    if out.is_null() {
        return null_arg("out");
    }
    guarded(|| {
        let inv = invert_warp(&(*warp).0)?;
        *out = Box::into_raw(Box::new(ConregWarp(inv)));
        Ok(ConregStatus::Ok)
    })
}

/// L² distance between two warps on the same grid.
#[no_mangle]
pub unsafe extern "C" fn conreg_warp_distance(
    a: *const ConregWarp,
    b: *const ConregWarp,
    out: *mut f64,
) -> ConregStatus {
    if a.is_null() || b.is_null() {
        return null_arg("warp");
    }
    if out.is_null() {
        return null_arg("out");
    }
    guarded(|| {
        *out = l2_warp_error(&(*a).0, &(*b).0)?;
        Ok(ConregStatus::Ok)
    })
}

#[no_mangle]
pub unsafe extern "C" fn conreg_warp_free(warp: *mut ConregWarp) {
    if !warp.is_null() {
        drop(Box::from_raw(warp));
    }
}

/// Registers `moving` onto `fixed`: finds the warp γ minimizing the
/// square-root-density distance ‖q_fixed − (q_moving, γ)‖. Passing 0 for
/// `basis_size` or `max_iters` selects the defaults. On success `*out`
/// holds the estimated warp and `*final_cost` (if non-null) the attained
/// cost.
#[no_mangle]
pub unsafe extern "C" fn conreg_register(
    fixed: *const ConregDensity,
    moving: *const ConregDensity,
    basis_size: size_t,
    max_iters: size_t,
    out: *mut *mut ConregWarp,
    final_cost: *mut f64,
) -> ConregStatus {
    if fixed.is_null() || moving.is_null() {
        return null_arg("density");
    }
    if out.is_null() {
        return null_arg("out");
    }
    guarded(|| {
        let q1 = q_map(&(*fixed).0);
        let q2 = q_map(&(*moving).0);
        let grid = match q1.domain().grid() {
            Some(g) => g.clone(),
            None => return Err(Error::Validation("registration here covers interval densities".into())),
        };
        let mut cfg = RegistrationConfig::interval();
        let last = *cfg.stages.last().unwrap();
        let top = (if basis_size == 0 { last.0 } else { basis_size }, if max_iters == 0 { last.1 } else { max_iters });
        cfg.stages.retain(|&(m, _)| m < top.0);
        cfg.stages.push(top);
        let basis = SineBasis::new(&grid, top.0.max(last.0))?;
        let reg = register_pair_1d(&q1, &q2, &basis, &cfg)?;
        if !final_cost.is_null() {
            *final_cost = *reg.cost_trace.last().unwrap();
        }
        *out = Box::into_raw(Box::new(ConregWarp(reg.warp)));
        Ok(ConregStatus::Ok)
    })
}

/// Builds a centered template from `count` densities on a common grid.
/// On success `*out_template` holds the template density; when
/// `out_warps` is non-null it must point at `count` slots which receive
/// the per-subject alignment warps.
#[no_mangle]
pub unsafe extern "C" fn conreg_template(
    densities: *const *const ConregDensity,
    count: size_t,
    out_template: *mut *mut ConregDensity,
    out_warps: *mut *mut ConregWarp,
) -> ConregStatus {
    if densities.is_null() {
        return null_arg("densities");
    }
    if out_template.is_null() {
        return null_arg("out_template");
    }
    guarded(|| {
        let handles = std::slice::from_raw_parts(densities, count);
        if handles.iter().any(|h| h.is_null()) {
            return Err(Error::Validation("density list contains a null handle".into()));
        }
        let fields: Vec<DensityField> = handles.iter().map(|h| (**h).0.clone()).collect();
        let grid = match fields[0].domain().grid() {
            Some(g) => g.clone(),
            None => return Err(Error::Validation("template here covers interval densities".into())),
        };
        let cfg = TemplateConfig::interval();
        let top = cfg
            .final_registration
            .stages
            .iter()
            .chain(&cfg.registration.stages)
            .map(|s| s.0)
            .max()
            .unwrap();
        let basis = SineBasis::new(&grid, top)?;
        let result = full_pipeline(&fields, &basis, &cfg)?;
        *out_template = Box::into_raw(Box::new(ConregDensity(q_unmap(&result.template)?)));
        if !out_warps.is_null() {
            let slots = std::slice::from_raw_parts_mut(out_warps, count);
            for (slot, warp) in slots.iter_mut().zip(result.warps) {
                *slot = Box::into_raw(Box::new(ConregWarp(warp)));
            }
        }
        Ok(ConregStatus::Ok)
    })
}
