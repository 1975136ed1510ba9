"""Task domain: predicates, symbolic states, actions, and the line-oriented DSL.

Grammar (one declaration per line, ``#`` starts a comment)::

    predicate <id> modality=<motion-force|visual> args=<a,b,...>
    state <id> { <pred-id>=<true|false>, ... }
    action <id> kp=<x,y,z> kd=<x,y,z> ref=<hold|descend|lissajous|push> ff=<fx,fy,fz> max_t=<seconds>
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

MODALITIES = ("motion-force", "visual")
REFERENCES = ("hold", "descend", "lissajous", "push")

_ID = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*\Z")


class DomainError(ValueError):
    """Raised for malformed or inconsistent domain definitions."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, column {column or 1}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Predicate:
    id: str
    modality: str
    args: tuple[str, ...] = ()


@dataclass(frozen=True)
class SymbolicState:
    id: str
    # predicate id -> truth value this state fixes; may cover a strict subset
    determined: dict[str, bool] = field(default_factory=dict)


@dataclass(frozen=True)
class Action:
    id: str
    kp: tuple[float, float, float]
    kd: tuple[float, float, float]
    ref: str
    ff: tuple[float, float, float] = (0.0, 0.0, 0.0)
    max_t: float = 1.0


@dataclass(frozen=True)
class DomainSpec:
    predicates: tuple[Predicate, ...]
    states: tuple[SymbolicState, ...]
    actions: tuple[Action, ...]

    @property
    def predicate_ids(self) -> list[str]:
        return [p.id for p in self.predicates]

    @property
    def state_ids(self) -> list[str]:
        return [s.id for s in self.states]

    @property
    def action_ids(self) -> list[str]:
        return [a.id for a in self.actions]

    def state_index(self, state_id: str) -> int:
        for i, s in enumerate(self.states):
            if s.id == state_id:
                return i
        raise KeyError(f"unknown state {state_id!r}")

    def action_index(self, action_id: str) -> int:
        for i, a in enumerate(self.actions):
            if a.id == action_id:
                return i
        raise KeyError(f"unknown action {action_id!r}")

    def predicate(self, predicate_id: str) -> Predicate:
        for p in self.predicates:
            if p.id == predicate_id:
                return p
        raise KeyError(f"unknown predicate {predicate_id!r}")

    def state(self, state_id: str) -> SymbolicState:
        return self.states[self.state_index(state_id)]

    def action(self, action_id: str) -> Action:
        return self.actions[self.action_index(action_id)]

    def with_predicates(self, predicate_ids) -> "DomainSpec":
        """Restrict the domain to a subset of predicates (used by modality ablations)."""
        keep = set(predicate_ids)
        preds = tuple(p for p in self.predicates if p.id in keep)
        states = tuple(
            SymbolicState(s.id, {k: v for k, v in s.determined.items() if k in keep})
            for s in self.states
        )
        return DomainSpec(preds, states, self.actions)


# -- parsing -----------------------------------------------------------------


def _parse_vec3(value: str, key: str, lineno: int, col: int) -> tuple[float, float, float]:
    parts = value.split(",")
    if len(parts) != 3:
        raise DomainError(f"{key} expects 3 comma-separated numbers, got {value!r}", lineno, col)
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError:
        raise DomainError(f"{key} has a non-numeric component: {value!r}", lineno, col) from None


def _check_id(token: str, lineno: int, col: int) -> str:
    if not _ID.match(token):
        raise DomainError(f"invalid identifier {token!r}", lineno, col)
    return token


def _keyvals(tokens: list[tuple[str, int]], allowed: set[str], lineno: int) -> dict[str, tuple[str, int]]:
    out: dict[str, tuple[str, int]] = {}
    for tok, col in tokens:
        if "=" not in tok:
            raise DomainError(f"expected key=value, got {tok!r}", lineno, col)
        key, _, value = tok.partition("=")
        if key not in allowed:
            raise DomainError(f"unknown key {key!r}", lineno, col)
        if key in out:
            raise DomainError(f"repeated key {key!r}", lineno, col)
        out[key] = (value, col + len(key) + 1)
    missing = allowed - set(out)
    if missing:
        raise DomainError(f"missing key(s): {', '.join(sorted(missing))}", lineno, 1)
    return out


def _tokens(text: str, offset: int = 0) -> list[tuple[str, int]]:
    return [(m.group(0), m.start() + 1 + offset) for m in re.finditer(r"\S+", text)]


def parse_domain(text: str) -> DomainSpec:
    """Parse DSL source into a validated :class:`DomainSpec`."""
    predicates: list[Predicate] = []
    states: list[SymbolicState] = []
    actions: list[Action] = []
    seen: dict[str, set[str]] = {"predicate": set(), "state": set(), "action": set()}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        toks = _tokens(line)
        kind, kcol = toks[0]
        if kind not in seen:
            raise DomainError(f"unknown declaration {kind!r}", lineno, kcol)
        if len(toks) < 2:
            raise DomainError(f"{kind} needs an identifier", lineno, len(line) + 1)
        ident = _check_id(toks[1][0], lineno, toks[1][1])
        if ident in seen[kind]:
            raise DomainError(f"duplicate {kind} id {ident!r}", lineno, toks[1][1])
        seen[kind].add(ident)

        if kind == "predicate":
            kv = _keyvals(toks[2:], {"modality", "args"}, lineno)
            modality, mcol = kv["modality"]
            if modality not in MODALITIES:
                raise DomainError(f"modality must be one of {MODALITIES}, got {modality!r}", lineno, mcol)
            args_s, acol = kv["args"]
            args = tuple(_check_id(a, lineno, acol) for a in args_s.split(",") if a)
            if len(args) > 2:
                raise DomainError("predicate arity above 2 is not supported", lineno, acol)
            predicates.append(Predicate(ident, modality, args))

        elif kind == "state":
            rest_col = toks[1][1] + len(ident)
            rest = line[rest_col - 1:].strip()
            start = line.index(rest, rest_col - 1) + 1 if rest else len(line) + 1
            if not (rest.startswith("{") and rest.endswith("}")):
                raise DomainError("state body must be enclosed in { }", lineno, start)
            body = rest[1:-1]
            determined: dict[str, bool] = {}
            pos = start + 1
            for chunk in body.split(","):
                col = pos + (len(chunk) - len(chunk.lstrip()))
                pos += len(chunk) + 1
                chunk = chunk.strip()
                if not chunk:
                    continue
                if "=" not in chunk:
                    raise DomainError(f"expected <predicate>=<true|false>, got {chunk!r}", lineno, col)
                pid, _, val = (s.strip() for s in chunk.partition("="))
                if val not in ("true", "false"):
                    raise DomainError(f"truth value must be true or false, got {val!r}", lineno, col)
                if pid not in seen["predicate"]:
                    raise DomainError(f"state {ident!r} references undeclared predicate {pid!r}", lineno, col)
                if pid in determined:
                    raise DomainError(f"predicate {pid!r} repeated in state {ident!r}", lineno, col)
                determined[pid] = val == "true"
            states.append(SymbolicState(ident, determined))

        else:
            kv = _keyvals(toks[2:], {"kp", "kd", "ref", "ff", "max_t"}, lineno)
            ref, rcol = kv["ref"]
            if ref not in REFERENCES:
                raise DomainError(f"ref must be one of {REFERENCES}, got {ref!r}", lineno, rcol)
            try:
                max_t = float(kv["max_t"][0])
            except ValueError:
                raise DomainError(f"max_t is not a number: {kv['max_t'][0]!r}", lineno, kv["max_t"][1]) from None
            actions.append(Action(
                ident,
                kp=_parse_vec3(kv["kp"][0], "kp", lineno, kv["kp"][1]),
                kd=_parse_vec3(kv["kd"][0], "kd", lineno, kv["kd"][1]),
                ref=ref,
                ff=_parse_vec3(kv["ff"][0], "ff", lineno, kv["ff"][1]),
                max_t=max_t,
            ))

    spec = DomainSpec(tuple(predicates), tuple(states), tuple(actions))
    report = validate_domain(spec)
    if report:
        raise DomainError("; ".join(report))
    return spec


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_domain(spec: DomainSpec) -> str:
    lines = []
    for p in spec.predicates:
        lines.append(f"predicate {p.id} modality={p.modality} args={','.join(p.args)}")
    for s in spec.states:
        body = ", ".join(f"{k}={'true' if v else 'false'}" for k, v in s.determined.items())
        lines.append(f"state {s.id} {{ {body} }}")
    for a in spec.actions:
        lines.append(
            f"action {a.id} kp={','.join(map(_fmt, a.kp))} kd={','.join(map(_fmt, a.kd))} "
            f"ref={a.ref} ff={','.join(map(_fmt, a.ff))} max_t={_fmt(a.max_t)}"
        )
    return "\n".join(lines) + "\n"


def validate_domain(spec: DomainSpec) -> list[str]:
    """Return a list of problems; an empty list means the domain is consistent."""
    report: list[str] = []
    for name, items in (("predicate", spec.predicates), ("state", spec.states), ("action", spec.actions)):
        if not items:
            report.append(f"no {name}s declared")
        ids = [x.id for x in items]
        for dup in sorted({i for i in ids if ids.count(i) > 1}):
            report.append(f"duplicate {name} id {dup!r}")
    pred_ids = {p.id for p in spec.predicates}
    for p in spec.predicates:
        if p.modality not in MODALITIES:
            report.append(f"predicate {p.id!r} has unknown modality {p.modality!r}")
    for s in spec.states:
        for pid in s.determined:
            if pid not in pred_ids:
                report.append(f"state {s.id!r} references undeclared predicate {pid!r}")
    for a in spec.actions:
        if min(a.kp) <= 0 or min(a.kd) <= 0:
            report.append(f"action {a.id!r} has non-positive gains")
        if not a.max_t > 0:
            report.append(f"action {a.id!r} has non-positive max_t")
        if a.ref not in REFERENCES:
            report.append(f"action {a.id!r} has unknown reference generator {a.ref!r}")
    return report


def determined_mask(state: SymbolicState | str, spec: DomainSpec) -> np.ndarray:
    """Boolean vector over ``spec.predicates``: True where the state fixes the predicate."""
    if isinstance(state, str):
        state = spec.state(state)
    elif state.id not in spec.state_ids:
        raise KeyError(f"unknown state {state.id!r}")
    return np.array([p.id in state.determined for p in spec.predicates], dtype=bool)


def truth_vector(state: SymbolicState | str, spec: DomainSpec) -> np.ndarray:
    """Truth values (0/1) over ``spec.predicates``; undetermined entries are 0."""
    if isinstance(state, str):
        state = spec.state(state)
    return np.array([float(state.determined.get(p.id, False)) for p in spec.predicates])


def mask_table(spec: DomainSpec) -> tuple[np.ndarray, np.ndarray]:
    """(|S| x |Phi|) mask and truth matrices."""
    masks = np.stack([determined_mask(s, spec) for s in spec.states])
    truths = np.stack([truth_vector(s, spec) for s in spec.states])
    return masks, truths


def load_domain(path: str | Path) -> DomainSpec:
    return parse_domain(Path(path).read_text(encoding="utf-8"))


def default_domain_text() -> str:
    return resources.files("predbayes.data").joinpath("insertion.domain").read_text(encoding="utf-8")


def default_domain() -> DomainSpec:
    return parse_domain(default_domain_text())
