"""Closed-loop success rates on the three hard variants with +-2 mm hole perturbation."""

from _common import emit, load, parser

from predbayes.eval import rows_to_csv, run_online
from predbayes.sim import HARD_TASKS


def main():
    p = parser(__doc__)
    p.add_argument("--trials", type=int, default=20, help="closed-loop episodes per task and method")
    p.add_argument("--methods", default="pred,state,manual")
    args = p.parse_args()
    spec, trajs = load(args)
    res = run_online(trajs, spec, HARD_TASKS, tuple(args.methods.split(",")), episodes=args.trials,
                     perturbation=0.002, seed=args.seed)
    emit(args.out, "online", rows_to_csv(res.rows), res.summary())


if __name__ == "__main__":
    main()
