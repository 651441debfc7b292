#!/usr/bin/env python3
"""Every analytic backward pass in the library, verified against central
finite differences.

The library ships no autodiff graph: each layer, loss, and calibrator
implements its own exact reverse-mode gradient. This script runs the full
verification suite, which perturbs every parameter coordinate by +/-1e-5 and
compares the centered difference quotient against the analytic gradient.
"""

import time

from lthead import run_gradcheck

start = time.perf_counter()
results = run_gradcheck("all", tol=1e-5)
elapsed = time.perf_counter() - start

width = max(len(r.name) for r in results)
print(f"{'check':{width}}  status  max rel err")
print("-" * (width + 22))
for r in results:
    status = "PASS" if r.report.passed else "FAIL"
    print(f"{r.name:{width}}  {status}    {r.report.max_rel_err:.3e}")

passed = sum(r.report.passed for r in results)
print("-" * (width + 22))
print(f"{passed}/{len(results)} checks passed in {elapsed:.1f}s at tolerance 1e-5")
