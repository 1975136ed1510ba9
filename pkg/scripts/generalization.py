"""Leave-one-task-out generalization of Pred and State (3 seeded repetitions per held-out task)."""

from _common import emit, load, parser

from predbayes.eval import rows_to_csv, run_generalization


def main():
    p = parser(__doc__)
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()
    spec, trajs = load(args)
    res = run_generalization(trajs, spec, ("pred", "state"), repeats=args.repeats, seed=args.seed)
    emit(args.out, "generalization", rows_to_csv(res.rows), res.summary())


if __name__ == "__main__":
    main()
