"""Codebook-size sweep (K in 8..128) for hierarchical, flat and continuous
bottlenecks on a synthetic cohort; writes one CSV row per (mode, K).

    python3 scripts/sweep_k.py --steps 1000 --out sweep.csv
"""
import argparse
import csv

import torch

from hst.config import (
    K_GRID, DecoderConfig, EncoderConfig, ModelConfig, QuantizerConfig, SsmConfig, TrainConfig, WindowSpec,
)
from hst.dataio import make_windows, noise_std_for_snr, random_switching_spec, synth_switching_lds
from hst.evalkit import reconstruction_metrics
from hst.trainkit import tokenize, train_tokenizer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--modes", default="hierarchical,flat,continuous")
    ap.add_argument("--grid", default=",".join(map(str, K_GRID)))
    ap.add_argument("--snr", type=float, default=10.0)
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args()
    torch.set_num_threads(1)

    spec = random_switching_spec(4, 16, dwell_mean=20, seed=3)
    sigma = noise_std_for_snr(spec, 4000, args.snr)
    recs = [synth_switching_lds(spec, 400, seed=100 + i, subject_id=f"s{i}", noise_std=sigma) for i in range(24)]
    train = make_windows(recs[:20], WindowSpec(40))
    test = make_windows(recs[20:], WindowSpec(40))
    rows = []
    for mode in args.modes.split(","):
        grid = [8] if mode == "continuous" else [int(k) for k in args.grid.split(",")]
        for K in grid:
            cfg = TrainConfig(
                phase1_steps=args.steps,
                model=ModelConfig(n_rois=16, window=40, ssm=SsmConfig(hidden=32),
                                  encoder=EncoderConfig(ff_mult=2), decoder=DecoderConfig(ff_mult=2),
                                  quantizer=QuantizerConfig(state_codes=K, transition_codes=K, mode=mode)),
            )
            _, x_hat = tokenize(train_tokenizer(train, cfg, log_every=0), test)
            row = {"mode": mode, "K": K, **reconstruction_metrics(test.windows, x_hat)}
            print(row, flush=True)
            rows.append(row)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["mode", "K", "r", "mse"])
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
