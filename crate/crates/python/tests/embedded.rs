//! Loads the module into an embedded interpreter; one test because the module
//! table must be set before the interpreter starts.

use dessilbi_py::dessilbi_py;
use pyo3::prelude::*;

#[test]
fn module_works_from_python() {
    pyo3::append_to_inittab!(dessilbi_py);
    Python::initialize();
    Python::attach(|py| {
        let script = c"
import json
import dessilbi_py as d

out = d.prox([3.0, 4.0], [1, 2, 1, 1], 1.0, scheme='per_filter')
assert abs(out[0] - 2.4) < 1e-12 and abs(out[1] - 3.2) < 1e-12, out
assert d.sparsity([0.0, 2.0]) == 0.5
assert abs(d.stepsize_bound(1.0, 10.0, 1.0) - 0.1) < 1e-15

cfg = '''
[dataset]
kind = 'sparse_linear'
n = 60
p = 8
s = 2
snr = 10.0

[network]
input = [8]
loss = 'mse'
layers = [{ kind = 'dense', inputs = 8, outputs = 1, bias = false }]

[optimizer]
alpha = 0.2
lambda = 0.5
variant = 'naive'

[run]
epochs = 5
batch_size = 0
'''
records = json.loads(d.train(cfg))
s = d.Session(cfg)
assert json.loads(s.run(5)) == records[1:]
assert s.epoch == 5

try:
    d.train(cfg, ['optimizer.nu=-1'])
    raise SystemExit('negative nu accepted')
except ValueError as e:
    assert 'optimizer.nu' in str(e)
try:
    s.gamma(3)
    raise SystemExit('missing layer accepted')
except ValueError:
    pass
";
        py.run(script, None, None).map_err(|e| e.display(py)).unwrap();
    });
}
