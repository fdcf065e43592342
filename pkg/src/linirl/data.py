"""Trajectory types and on-disk formats.

Trajectories are stored as JSON Lines, one trajectory per line::

    {"origin": 0, "dest": 5, "segments": [{"obs": [[0, 1], [1, null]]},
                                           {"gap": [1, 4]},
                                           {"obs": [[4, 5], [5, null]]}]}

Each observed step is ``[state, action]``.  The action is ``null`` only on
the last step of a run: the state was observed but the action taken there
was not (a gap follows, or the state is the destination).  ``dest`` is an
integer or, for multi-state destination sets, a list of integers.

Networks are stored as a directory holding ``network.csv`` (header
``from,to,<feature names>``, one row per directed transition) and
``manifest.json`` (``{"features": [{"name": ..., "kind": "real"|"bool"}],
"n_states": ...}``).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ValidationError
from .mdp import Mdp

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Observed:
    """A run of consecutive observed ``(state, action)`` steps."""

    steps: tuple

    def __post_init__(self):
        steps = tuple((int(s), None if a is None else int(a)) for s, a in self.steps)
        if not steps:
            raise ValidationError("observed run is empty")
        for s, a in steps[:-1]:
            if a is None:
                raise ValidationError(f"missing action at state {s} inside an observed run")
        object.__setattr__(self, "steps", steps)

    @property
    def states(self):
        return [s for s, _ in self.steps]


@dataclass(frozen=True)
class Gap:
    """Missing segment between observed states ``u`` and ``v``."""

    u: int
    v: int

    def __post_init__(self):
        object.__setattr__(self, "u", int(self.u))
        object.__setattr__(self, "v", int(self.v))
        if self.u == self.v:
            raise ValidationError(f"gap endpoints must differ (got {self.u})")


Segment = Union[Observed, Gap]


@dataclass(frozen=True)
class Trajectory:
    segments: tuple
    dest: tuple

    def __post_init__(self):
        segs = tuple(self.segments)
        dest = self.dest
        if isinstance(dest, (int, np.integer)):
            dest = (int(dest),)
        dest = tuple(sorted(int(d) for d in dest))
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "dest", dest)
        if not segs or not isinstance(segs[0], Observed) or not isinstance(segs[-1], Observed):
            raise ValidationError("trajectories must start and end with an observed run")
        for prev, cur in zip(segs, segs[1:]):
            if isinstance(prev, Gap) == isinstance(cur, Gap):
                raise ValidationError("observed runs and gaps must alternate")
            if isinstance(cur, Gap):
                last_s, last_a = prev.steps[-1]
                if last_a is not None or last_s != cur.u:
                    raise ValidationError(
                        f"gap ({cur.u}, {cur.v}) must follow a run ending at state {cur.u} "
                        "with no observed action")
            else:
                if cur.steps[0][0] != prev.v:
                    raise ValidationError(
                        f"gap ({prev.u}, {prev.v}) must be followed by a run starting at {prev.v}")
        last_s, last_a = segs[-1].steps[-1]
        if last_a is not None:
            raise ValidationError("the final observed step must carry no action")
        if last_s not in dest:
            raise ValidationError(f"trajectory ends at {last_s}, not in its destination set {dest}")

    @classmethod
    def complete(cls, steps, dest=None) -> "Trajectory":
        """Fully observed trajectory from ``[(s, a), ..., (d, None)]``."""
        steps = list(steps)
        if dest is None:
            dest = steps[-1][0]
        return cls((Observed(tuple(steps)),), dest)

    @classmethod
    def from_states(cls, states, dest=None) -> "Trajectory":
        """Complete trajectory on a deterministic MDP where action id = next state."""
        states = [int(s) for s in states]
        steps = [(s, s2) for s, s2 in zip(states, states[1:])] + [(states[-1], None)]
        return cls.complete(steps, dest)

    @property
    def origin(self) -> int:
        return self.segments[0].steps[0][0]

    @property
    def runs(self) -> list[Observed]:
        return [s for s in self.segments if isinstance(s, Observed)]

    @property
    def gaps(self) -> list[Gap]:
        return [s for s in self.segments if isinstance(s, Gap)]

    @property
    def is_complete(self) -> bool:
        return len(self.segments) == 1

    def observed_steps(self):
        """All ``(state, action)`` pairs with an observed action."""
        return [(s, a) for run in self.runs for s, a in run.steps if a is not None]

    def states(self) -> list[int]:
        """Observed states in order (gap interiors are unknown and skipped)."""
        return [s for run in self.runs for s in run.states]

    def split(self, cut=None) -> list["Trajectory"]:
        """Cut at missing segments into separate trajectories.

        ``cut(j, gap)`` decides whether to cut at the ``j``-th gap (default:
        every gap).  A piece that ends before a cut gap ``(u, v)`` gets the
        destination ``u`` and ends at its first visit to ``u``: a path that
        passes ``u`` and later returns has no first-passage probability, so
        the loop is dropped.  The last piece keeps this trajectory's
        destination.  Uncut gaps stay inside their piece.
        """
        pieces, current, j = [], [], 0
        for seg in self.segments:
            if isinstance(seg, Gap):
                if cut is None or cut(j, seg):
                    pieces.append(_until_first_visit(current, seg.u))
                    current = []
                else:
                    current.append(seg)
                j += 1
            else:
                current.append(seg)
        pieces.append(Trajectory(tuple(current), self.dest))
        return pieces

    def validate(self, mdp: Mdp):
        """Check actions, observed transitions and destinations against ``mdp``."""
        for run in self.runs:
            for (s, a), (s2, _) in zip(run.steps, run.steps[1:]):
                row = mdp.sa_row(s, a)
                if mdp.kernel_entry(row, s2) <= 0:
                    raise ValidationError(
                        f"observed transition {s} -({a})-> {s2} has zero probability")
        transient = set(self.dest) - mdp.absorbing
        if transient and len(self.dest) > 1:
            raise ValidationError(f"destinations {sorted(transient)} are not absorbing in the MDP")
        if transient:
            # a single transient destination ends the trajectory at its first visit
            d = self.dest[0]
            if d in self.states()[:-1]:
                raise ValidationError(f"trajectory visits its transient destination {d} "
                                      "before the end")
        n = mdp.n_states
        for s in self.states():
            if not 0 <= s < n:
                raise ValidationError(f"state {s} out of range")

    def to_json(self) -> dict:
        segs = []
        for seg in self.segments:
            if isinstance(seg, Gap):
                segs.append({"gap": [seg.u, seg.v]})
            else:
                segs.append({"obs": [[s, a] for s, a in seg.steps]})
        dest = self.dest[0] if len(self.dest) == 1 else list(self.dest)
        return {"origin": self.origin, "dest": dest, "segments": segs}

    @classmethod
    def from_json(cls, obj) -> "Trajectory":
        try:
            segs = []
            for seg in obj["segments"]:
                if "gap" in seg:
                    u, v = seg["gap"]
                    segs.append(Gap(u, v))
                else:
                    segs.append(Observed(tuple(tuple(step) for step in seg["obs"])))
            traj = cls(tuple(segs), obj["dest"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed trajectory record: {exc}") from exc
        if "origin" in obj and int(obj["origin"]) != traj.origin:
            raise ValidationError(f"origin {obj['origin']} does not match first state {traj.origin}")
        return traj


# ----------------------------------------------------------------------
# trajectory files


def _until_first_visit(segments, u) -> Trajectory:
    """Trajectory to the transient destination ``u``, cut at the first observed visit."""
    out = []
    for seg in segments:
        if isinstance(seg, Observed) and u in seg.states:
            i = seg.states.index(u)
            out.append(Observed(tuple(seg.steps[:i]) + ((u, None),)))
            break
        out.append(seg)
    return Trajectory(tuple(out), (u,))


def write_trajectories(path, trajectories: Iterable[Trajectory]):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_json(), separators=(",", ":")) + "\n")


def read_trajectories(path) -> list[Trajectory]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(Trajectory.from_json(obj))
            except (json.JSONDecodeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return out


# ----------------------------------------------------------------------
# network files


def write_network(directory, mdp: Mdp, feature_kinds: Sequence[str] | None = None,
                  run_manifest: dict | None = None):
    """Write a deterministic MDP as ``network.csv`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if mdp.k_prob.size and not np.all(mdp.k_prob == 1.0):
        raise ValidationError("only deterministic kernels can be written as edge lists")
    if feature_kinds is None:
        feature_kinds = ["real"] * mdp.n_features
    with (directory / "network.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["from", "to", *mdp.feature_names])
        for s, s2, f in zip(mdp.k_src.tolist(), mdp.k_col.tolist(), mdp.k_feat.tolist()):
            w.writerow([s, s2, *(repr(float(x)) for x in f)])
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "n_states": mdp.n_states,
        "features": [{"name": n, "kind": k} for n, k in zip(mdp.feature_names, feature_kinds)],
        "absorbing": sorted(mdp.absorbing),
    }
    if run_manifest is not None:
        manifest["run"] = run_manifest
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")


def read_network(directory) -> Mdp:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        names = [f["name"] for f in manifest["features"]]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"bad network manifest in {directory}: {exc}") from exc
    src, dst, vals = [], [], []
    with (directory / "network.csv").open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["from", "to"] or header[2:] != names:
            raise ValidationError(f"{directory}/network.csv:1: header does not match manifest")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 2 + len(names):
                raise ValidationError(f"network.csv:{lineno}: expected {2 + len(names)} fields")
            try:
                src.append(int(row[0]))
                dst.append(int(row[1]))
                vals.append([float(x) if x != "" else 0.0 for x in row[2:]])
            except ValueError as exc:
                raise ValidationError(f"network.csv:{lineno}: {exc}") from exc
    n_states = int(manifest.get("n_states", 1 + max(src + dst, default=-1)))
    fv = np.array(vals, dtype=float).reshape(len(src), len(names))
    return Mdp.from_edges(n_states, src, dst, fv, names, manifest.get("absorbing", ()))
