"""Train the scaled synthetic study and the ablation grid, then print a summary.

    python3 scripts/run_study.py --out results/            # main run + 3-seed ablations
    python3 scripts/run_study.py --skip-ablations --set train.weights.alpha_c=2
"""

import argparse
import json
import time
from pathlib import Path

import torch

from talkhead import study
from talkhead.config import apply_overrides, config_from_dict
from talkhead.data import TensorCorpus


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results", help="directory for the JSON results")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="ablation seeds")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--skip-ablations", action="store_true")
    args = parser.parse_args()

    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = config_from_dict(apply_overrides(study.study_config(args.seed).to_dict(), args.overrides)).validate()
    start = time.perf_counter()
    corpus = TensorCorpus.synthetic(cfg.data, n_mels=cfg.model.n_mels)
    print(f"corpus: {len(corpus)} sequences in {time.perf_counter() - start:.0f} s")

    main_run = study.run_study(cfg, corpus, log_path=out / "loss_log.tsv")
    study.dump({"config": cfg.to_dict(), "result": main_run}, out / "study.json")
    summary = main_run.to_dict()
    print(json.dumps({k: v for k, v in summary.items() if k != "final_losses"}, indent=1))

    if not args.skip_ablations:
        def progress(name, res):
            print(f"  {name:<18} seed {res.seed}  LVE {res.lve:.4f}  ({res.seconds:.0f} s)", flush=True)

        runs = study.run_ablations(cfg, corpus, seeds=tuple(args.seeds), progress=progress,
                                   reuse={("full", cfg.train.seed): main_run})
        verdict = study.ablation_verdict(runs)
        study.dump({"runs": runs, "verdict": verdict}, out / "ablations.json")
        print(json.dumps(verdict, indent=1))
    print(f"total wall time {time.perf_counter() - start:.0f} s")


if __name__ == "__main__":
    main()
