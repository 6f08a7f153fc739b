"""
The phantom benchmark, end to end
=================================

Source training, the ratio prior, adaptation with and without the KL term,
AdaSource and the target-supervised Oracle, then the report figures.  About
ten minutes on one CPU core.  The same steps are available one at a time
from the ``srda`` command line.
"""

import logging
import sys

from srda.benchmark import run_benchmark
from srda.report import make_report

logging.basicConfig(level=logging.INFO, format="%(message)s")
root = sys.argv[1] if len(sys.argv) > 1 else "phantom_bench"

result = run_benchmark(root, seed=0, entropy_only=True)
for name, score in result.scores.items():
    print(f"{name:12s} DSC {100 * score.mean_dsc:5.1f}  HD {score.mean_hd:5.2f}  entropy {score.mean_entropy:.4f}")

written = make_report(f"{root}/runs", f"{root}/figs")
print((written["table"]).read_text())
