"""Shared helpers for the experiment scripts."""

import argparse
import json
from pathlib import Path

from predbayes import io as pio
from predbayes.domain import default_domain
from predbayes.eval import generate_dataset


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--data", help="dataset directory from `predbayes generate` (simulated on the fly if omitted)")
    p.add_argument("--episodes", type=int, default=15, help="episodes per task when simulating")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="reports")
    return p


def load(args):
    spec = default_domain()
    if args.data:
        trajs, _ = pio.load_dataset(args.data)
    else:
        trajs = generate_dataset(spec, episodes_per_task=args.episodes, seed=args.seed)
    return spec, trajs


def emit(out: str, name: str, csv_text: str, summary: dict) -> None:
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{name}.csv").write_text(csv_text)
    pio.write_json(d / f"{name}_summary.json", summary)
    print(json.dumps(summary, indent=1, sort_keys=True))
