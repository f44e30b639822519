use pyo3::prelude::*;
use sci_unfold_py::sci_unfold_py;

#[test]
fn module_works_inside_an_embedded_interpreter() {
    pyo3::append_to_inittab!(sci_unfold_py);
    Python::initialize();
    Python::attach(|py| {
        py.run(
            cr#"
import json
import numpy as np
import sci_unfold_py as su

m = su.generate_masks(2, 8, 8, seed=1)
x = np.linspace(0.0, 1.0, 128).reshape(2, 8, 8)
y = su.compress(x, m)
assert y.shape == (8, 8)
assert np.allclose(y, (m * x).sum(axis=0))
net = su.Network(json.dumps({"phases": 1, "widths": [2, 2, 2]}))
assert net.reconstruct(y, m).shape == (2, 8, 8)
assert "phases=1" in repr(net)
try:
    net.eta(2)
except ValueError:
    pass
else:
    raise AssertionError("eta(2) should fail for a one-phase network")
"#,
            None,
            None,
        )
        .unwrap_or_else(|e| {
            e.print(py);
            panic!("embedded script failed");
        });
    });
}
