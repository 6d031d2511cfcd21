"""Per-dimension structure classification and the parent filter.

Each latent dimension is classified against the target and the environment
label into one of ten structures. The marginal independence pattern between
the dimension X, the target Y and the environment E settles most cases;
conditional tests split the all-dependent pattern, an additive-noise fit
orients a lone X-Y edge, and the mechanism-change score orients an X-Y edge
when both ends also depend on E.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..semgen import StructureKind
from .direction import UNDECIDED, X_TO_Y, Y_TO_X, anm_direction, delta_criterion
from .independence import CIConfig, test_cond_independence, test_independence

CLASSIFIED = "classified"
UNDECIDED_STATUS = "undecided"
UNCLASSIFIABLE = "unclassifiable"
NOISE = "noise-dimension"

# rule id -> (required marginal pattern, verdict). Pattern entries are
# "dependent" flags for (X~Y, X~E, E~Y).
MARGINAL_RULES = {
    "1.1": ((False, True, False), StructureKind.E),
    "1.2": ((True, False, True), StructureKind.I),
    "1.3": ((True, True, False), StructureKind.G),
}
CONDITIONAL_RULES = {
    "1.4": ("X_indep_Y_given_E", StructureKind.K),
    "1.5": ("X_indep_E_given_Y", StructureKind.J),
    "1.6": ("Y_indep_E_given_X", StructureKind.F),
}
DIRECTION_RULES = {
    ("anm", X_TO_Y): ("2.1", StructureKind.C),
    ("anm", Y_TO_X): ("2.2", StructureKind.D),
    ("delta", X_TO_Y): ("3.1", StructureKind.L),
    ("delta", Y_TO_X): ("3.2", StructureKind.M),
}
PARENT_RULES = {
    StructureKind.I: "1.2",
    StructureKind.F: "1.6",
    StructureKind.C: "2.1",
    StructureKind.L: "3.1",
}


class EmptyParentSetError(RuntimeError):
    """No dimension matched a parent rule."""

    def __init__(self, verdicts):
        self.verdicts = verdicts
        super().__init__(
            "no latent dimension matched a parent rule; fall back with "
            "fallback_parent(X_hat, y) or CausalParentSelector(fallback=True)"
        )


@dataclass(frozen=True)
class StructureVerdict:
    tag: StructureKind | None
    rule: str | None
    status: str
    evidence: tuple = field(default=(), compare=False)

    @property
    def is_parent(self) -> bool:
        return self.tag in PARENT_RULES

    def to_dict(self) -> dict:
        return {
            "tag": None if self.tag is None else self.tag.value,
            "rule": self.rule,
            "status": self.status,
            "evidence": [dict(e) for e in self.evidence],
        }


@dataclass(frozen=True)
class ParentVerdict:
    latent_index: int
    is_parent: bool
    matched_rule: str | None
    structure: StructureVerdict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.is_parent != (self.matched_rule is not None):
            raise ValueError("is_parent must agree with matched_rule")

    def to_dict(self) -> dict:
        out = {"latent_index": self.latent_index, "is_parent": self.is_parent,
               "matched_rule": self.matched_rule}
        if self.structure is not None:
            out["structure"] = self.structure.to_dict()
        return out


def dispatch(outcomes: dict) -> tuple[StructureKind | None, str | None, str]:
    """Map recorded test outcomes to ``(tag, rule, status)``.

    ``outcomes`` holds booleans ``X~Y``, ``X~E``, ``E~Y`` (True means
    dependent), optionally the three conditional independence keys with
    their p-values under ``p:<key>``, and ``anm`` or ``delta`` directions.
    Returns ``None`` for the tag when a needed outcome is missing.
    """
    xy, xe, ey = outcomes["X~Y"], outcomes["X~E"], outcomes["E~Y"]
    if not xy and not xe:
        return None, None, NOISE
    pattern = (xy, xe, ey)
    for rule, (want, tag) in MARGINAL_RULES.items():
        if pattern == want:
            return tag, rule, CLASSIFIED
    if pattern == (True, False, False):
        direction = outcomes.get("anm")
        if direction is None or direction == UNDECIDED:
            return None, None, UNDECIDED_STATUS
        rule, tag = DIRECTION_RULES[("anm", direction)]
        return tag, rule, CLASSIFIED
    if pattern != (True, True, True):
        return None, None, UNCLASSIFIABLE
    # all marginals dependent: a single accepted conditional independence
    # picks its rule; several are resolved by the largest p-value
    accepted = [(outcomes[f"p:{key}"], rule) for rule, (key, _) in CONDITIONAL_RULES.items()
                if outcomes.get(key)]
    if accepted:
        rule = max(accepted)[1]
        return CONDITIONAL_RULES[rule][1], rule, CLASSIFIED
    direction = outcomes.get("delta")
    if direction is None or direction == UNDECIDED:
        return None, None, UNDECIDED_STATUS
    rule, tag = DIRECTION_RULES[("delta", direction)]
    return tag, rule, CLASSIFIED


def replay(evidence) -> tuple[StructureKind | None, str | None, str]:
    """Re-run the dispatch on a verdict's evidence trail."""
    return dispatch(_outcomes(evidence))


def _outcomes(evidence) -> dict:
    out = {}
    for item in evidence:
        if item["kind"] == "marginal":
            out[item["name"]] = not item["independent"]
        elif item["kind"] == "conditional":
            out[item["name"]] = item["independent"]
            out["p:" + item["name"]] = item["p_value"]
        else:
            out[item["kind"]] = item["direction"]
    return out


def _ci_entry(kind, name, res) -> dict:
    return {"kind": kind, "name": name, "p_value": res.p_value,
            "independent": res.independent, "method": res.method}


def classify_structure(x, y, env, cfg: CIConfig = CIConfig()) -> StructureVerdict:
    """Classify the relation between one dimension ``x``, target ``y`` and ``env``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    env = np.asarray(env).ravel()
    if not (x.size == y.size == env.size):
        raise ValueError("x, y and env must be aligned")
    evidence = [
        _ci_entry("marginal", "X~Y", test_independence(x, y, cfg=cfg.with_seed("X~Y"))),
        _ci_entry("marginal", "X~E", test_independence(x, env, b_discrete=True, cfg=cfg.with_seed("X~E"))),
        _ci_entry("marginal", "E~Y", test_independence(y, env, b_discrete=True, cfg=cfg.with_seed("E~Y"))),
    ]
    xy, xe, ey = (not e["independent"] for e in evidence)
    if (xy, xe, ey) == (True, False, False):
        d = anm_direction(x, y, cfg.with_seed("anm"), check_dependence=False)
        evidence.append({"kind": "anm", **d.to_dict()})
    elif xy and xe and ey:
        conditional = {
            "X_indep_Y_given_E": lambda c: test_cond_independence(x, y, env, c_discrete=True, cfg=c),
            "X_indep_E_given_Y": lambda c: test_cond_independence(x, env, y, b_discrete=True, cfg=c),
            "Y_indep_E_given_X": lambda c: test_cond_independence(y, env, x, b_discrete=True, cfg=c),
        }
        for name, run in conditional.items():
            evidence.append(_ci_entry("conditional", name, run(cfg.with_seed(name))))
        if not any(e["independent"] for e in evidence[3:]):
            scores = delta_criterion(x, y, env, cfg.with_seed("delta"))
            evidence.append({"kind": "delta", "direction": scores.direction, **scores.to_dict()})
    tag, rule, status = dispatch(_outcomes(evidence))
    return StructureVerdict(tag, rule, status, tuple(evidence))


def _parent_verdict(i: int, structure: StructureVerdict) -> ParentVerdict:
    rule = PARENT_RULES.get(structure.tag)
    return ParentVerdict(i, rule is not None, rule, structure)


def assess_dimensions(X_hat, y, env, cfg: CIConfig = CIConfig(), n_jobs: int = 1) -> list[ParentVerdict]:
    """Parent verdict for every column of ``X_hat``; columns are independent jobs."""
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X_hat.ndim != 2:
        raise ValueError(f"X_hat must be 2-D, got shape {X_hat.shape}")
    if X_hat.shape[0] != np.asarray(y).reshape(-1).size:
        raise ValueError("X_hat and y must have the same number of rows")

    def one(i):
        return _parent_verdict(i, classify_structure(X_hat[:, i], y, env, cfg.with_seed("dim", i)))

    if n_jobs == 1:
        return [one(i) for i in range(X_hat.shape[1])]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(one, range(X_hat.shape[1])))


def discover_parents(X_hat, y, env, cfg: CIConfig = CIConfig(), n_jobs: int = 1) -> tuple[list[int], list[ParentVerdict]]:
    """Indices of latent dimensions judged to be direct causes of ``y``.

    Raises EmptyParentSetError (carrying the verdicts) when none qualifies.
    """
    verdicts = assess_dimensions(X_hat, y, env, cfg, n_jobs)
    parents = [v.latent_index for v in verdicts if v.is_parent]
    if not parents:
        raise EmptyParentSetError(verdicts)
    return parents, verdicts


def fallback_parent(X_hat, y) -> int:
    """Dimension with the largest absolute Spearman correlation with ``y``."""
    X_hat = np.asarray(X_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    rho = [abs(stats.spearmanr(X_hat[:, i], y)[0]) for i in range(X_hat.shape[1])]
    rho = np.nan_to_num(np.asarray(rho), nan=0.0)
    return int(np.argmax(rho))
