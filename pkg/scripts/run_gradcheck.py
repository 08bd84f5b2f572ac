"""Print the finite-difference gradient table (same as ``talkhead gradcheck``)."""

import sys

import torch

from talkhead import gradcheck as gc

if __name__ == "__main__":
    torch.set_num_threads(1)
    results = gc.run_all(sys.argv[1:] or None)
    print(gc.format_table(results))
    sys.exit(0 if all(r.passed for r in results) and gc.negative_control() else 4)
