//! Drives the bindings through an embedded interpreter.

use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

fn with_module<R>(f: impl FnOnce(Python<'_>, &Bound<'_, PyDict>) -> PyResult<R>) -> R {
    Python::attach(|py| {
        let m = PyModule::new(py, "hfwave")?;
        hfwave_py::hfwave_py(&m)?;
        py.import("sys")?
            .getattr("modules")?
            .set_item("hfwave", &m)?;
        let scope = PyDict::new(py);
        scope.set_item("hfwave", m)?;
        f(py, &scope)
    })
    .map_err(|e: PyErr| e.to_string())
    .unwrap()
}

#[test]
fn transform_and_enhancement_roundtrip() {
    with_module(|py, scope| {
        py.run(
            c"
x = hfwave.Tensor([float((i * 7) % 13) for i in range(32)], [4, 4, 2])
bands = hfwave.haar_forward(x)
assert [b.shape for b in bands] == [[2, 2, 2]] * 4
assert hfwave.haar_inverse(*bands).max_abs_diff(x) < 1e-12
assert abs(sum(b.sum_sq() for b in bands) - x.sum_sq()) < 1e-9
y = hfwave.hfqe_enhance(x)
assert all(abs(v - 15 * round(v / 15)) < 1e-9 for v in hfwave.haar_forward(y)[0].tolist())
assert hfwave.concat_hf(x).shape == [2, 2, 6]
assert hfwave.top_k(hfwave.Tensor([0.0, 3.0, 1.0, 2.0], [4, 1]), 0.5) == [1, 3]
assert hfwave.gradcheck('mixing', 3) <= 1e-4
assert hfwave.reference_attention(hfwave.Tensor([1.0] * 8, [2, 4])).shape == [2, 4]
",
            Some(scope),
            None,
        )
    })
}

#[test]
fn errors_map_to_python_exceptions() {
    with_module(|py, scope| {
        py.run(
            c"
for call in (lambda: hfwave.Tensor([1.0], [2]),
             lambda: hfwave.haar_forward(hfwave.Tensor([0.0] * 3, [3, 1, 1])),
             lambda: hfwave.hfqe_enhance(hfwave.Tensor([0.0] * 4, [2, 2, 1]), q=0.0),
             lambda: hfwave.gradcheck('attention'),
             lambda: hfwave.TrainConfig(nonsense=1)):
    try:
        call()
    except ValueError:
        pass
    else:
        raise AssertionError('expected ValueError')
try:
    hfwave.Tensor.load('/nonexistent/file.htns')
except OSError:
    pass
else:
    raise AssertionError('expected OSError')
",
            Some(scope),
            None,
        )
    })
}

#[test]
fn short_training_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_owned();
    with_module(|py, scope| {
        scope.set_item("out", &out)?;
        py.run(
            c"
cfg = hfwave.TrainConfig(steps=4, stage1_steps=2, ids_per_batch=4, hfqe=True)
assert 'steps=4' in cfg.to_kv()
assert 'hfqe=false' in cfg.ablated().to_kv()
r = hfwave.train(cfg, out)
assert r['steps'] == 4 and 0.0 <= r['top1'] <= 1.0
top1, mean_ap = hfwave.evaluate(r['checkpoint'])
assert 0.0 <= mean_ap <= 1.0
",
            Some(scope),
            None,
        )
    })
}
