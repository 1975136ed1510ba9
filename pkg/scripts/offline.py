"""5-fold offline comparison of Pred, State, Manual and the single-modality ablations."""

import time

from _common import emit, load, parser

from predbayes.eval import ALL_METHODS, rows_to_csv, run_offline


def main():
    p = parser(__doc__)
    p.add_argument("--k", type=int, default=5)
    args = p.parse_args()
    spec, trajs = load(args)
    t0 = time.perf_counter()
    res = run_offline(trajs, spec, ALL_METHODS, k=args.k, seed=args.seed)
    summary = res.summary()
    summary["_runtime_s"] = round(time.perf_counter() - t0, 1)
    emit(args.out, "offline", rows_to_csv(res.rows), summary)


if __name__ == "__main__":
    main()
