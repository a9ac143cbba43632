use pyo3::prelude::*;

#[pymodule]
fn diffquant_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
