"""Fraction of synthetic contrastive pre-logits inside the known/unknown norm tubes.

Known vectors should sit in (1 - zeta, 1 + zeta); unknown ones below rho.
"""

import argparse

import numpy as np

from owseg import synth


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--zeta", type=float, default=0.2)
    ap.add_argument("--rho", type=float, default=0.4)
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    known, unknown = [], []
    for seed in range(args.seeds):
        for spec in synth.demo_specs(seed=seed):
            sc = synth.generate(spec)
            norms = np.linalg.norm(sc.con_features, axis=-1)
            is_known = sc.semantic <= spec.num_known
            known.append(norms[is_known])
            unknown.append(norms[~is_known])
    known, unknown = np.concatenate(known), np.concatenate(unknown)
    in_tube = ((known > 1 - args.zeta) & (known < 1 + args.zeta)).mean()
    print(f"known   n={known.size:6d}  in ({1 - args.zeta:.2f}, {1 + args.zeta:.2f}): {in_tube:.3f}")
    print(f"unknown n={unknown.size:6d}  below {args.rho:.2f}: {(unknown < args.rho).mean():.3f}")


if __name__ == "__main__":
    main()
