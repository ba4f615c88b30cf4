"""Wire format for instances: a JSON object ``{kind, params, seed}``.

Each kind validates its own params; :func:`build_instance` turns a parsed spec
into an oracle plus the derived constants worth echoing in artifacts.
"""

import json
from typing import Annotated, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter

from . import instances, oracle
from .errors import DomainError
from .rng import generator

Vector = List[float]
Matrix = List[List[float]]


class _Params(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GaussianParams(_Params):
    mean: Vector
    cov: Optional[Matrix] = None


class MixtureParams(_Params):
    weights: Vector
    means: List[Vector]
    covs: List[Matrix]


class HsParams(_Params):
    J: Matrix
    h: Vector


class StitchedParams(_Params):
    u: Vector


class LowerBoundFields(_Params):
    d: int = Field(ge=1)
    L: float = Field(gt=0)
    M: float = Field(gt=0)
    eps: float = Field(gt=0, lt=1.0 / 200.0)


class PerturbedParams(LowerBoundFields):
    v: Optional[Vector] = None
    gamma: Optional[float] = None
    cap_index: int = Field(default=0, ge=0)
    n_caps: int = Field(default=1, ge=1)


class OptParams(_Params):
    d: int = Field(ge=1)
    L: float = Field(gt=0)
    m: float = Field(gt=0)
    R: float = Field(gt=0)
    eps: float = Field(gt=0)
    center: Optional[Vector] = None


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    seed: int = 0


class GaussianSpec(_Spec):
    kind: Literal["gaussian"]
    params: GaussianParams


class MixtureSpecModel(_Spec):
    kind: Literal["mixture"]
    params: MixtureParams


class HsSpec(_Spec):
    kind: Literal["hs"]
    params: HsParams


class StitchedSpec(_Spec):
    kind: Literal["stitched"]
    params: StitchedParams


class BaseSpec(_Spec):
    kind: Literal["lb_base"]
    params: LowerBoundFields


class PerturbedSpec(_Spec):
    kind: Literal["lb_perturbed"]
    params: PerturbedParams


class OptSpec(_Spec):
    kind: Literal["opt"]
    params: OptParams


InstanceSpec = Annotated[
    Union[GaussianSpec, MixtureSpecModel, HsSpec, StitchedSpec, BaseSpec, PerturbedSpec, OptSpec],
    Field(discriminator="kind"),
]
instance_adapter = TypeAdapter(InstanceSpec)


def parse_spec(data):
    """Validate a dict (or a materialized instance file holding one under
    ``spec``) into an InstanceSpec model."""
    if isinstance(data, dict) and "spec" in data and "kind" not in data:
        data = data["spec"]
    return instance_adapter.validate_python(data)


def load_spec(path):
    with open(path, encoding="utf-8") as fh:
        return parse_spec(json.load(fh))


def json_schema():
    return instance_adapter.json_schema()


def _lower_bound_params(p):
    return instances.LowerBoundParams(p.d, p.L, p.M, p.eps)


def _planted_center(p, seed):
    r = instances.bump_radius(p.L, p.eps)
    centers = instances.pack_opt_centers(p.R, r, p.d)
    if len(centers) == 0:
        raise DomainError("no lattice center fits inside the ball")
    pick = int(generator(seed, "opt_center").integers(len(centers)))
    return centers[pick], len(centers)


def build_instance(spec):
    """Return ``(oracle, derived)`` for a parsed spec."""
    p = spec.params
    kind = spec.kind
    if kind == "gaussian":
        mean = np.asarray(p.mean, dtype=float)
        cov = np.eye(mean.size) if p.cov is None else np.asarray(p.cov, dtype=float)
        return oracle.make_gaussian(mean, cov), {"d": int(mean.size)}
    if kind == "mixture":
        mix = oracle.MixtureSpec(p.weights, p.means, p.covs)
        return oracle.make_mixture(mix), {"d": mix.dim, "components": mix.size}
    if kind == "hs":
        J = np.asarray(p.J, dtype=float)
        h = np.asarray(p.h, dtype=float)
        ev = np.linalg.eigvalsh(J)
        return oracle.make_hs_mixture(J, h), {"d": int(h.size), "eig_min": float(ev.min()),
                                              "eig_max": float(ev.max())}
    if kind == "stitched":
        u = np.asarray(p.u, dtype=float)
        return instances.build_stitched(u), {"d": int(u.size), "s": float(u @ u)}
    if kind == "lb_base":
        base = instances.build_base(_lower_bound_params(p))
        return base.potential, dict(base.params.derived(), d=p.d)
    if kind == "lb_perturbed":
        params = _lower_bound_params(p)
        base = instances.build_base(params)
        if p.v is not None:
            v = np.asarray(p.v, dtype=float)
        else:
            caps = instances.pack_caps(params, max(p.n_caps, p.cap_index + 1), seed=spec.seed)
            if p.cap_index >= len(caps):
                raise DomainError(f"only {len(caps)} caps could be packed")
            v = caps[p.cap_index]
        lo, hi = instances.gamma_bracket(params)
        gamma = p.gamma if p.gamma is not None else instances.solve_gamma(base, v)
        inst = instances.build_perturbed(base, v, gamma)
        derived = dict(params.derived(), d=p.d, v=v.tolist(), gamma=gamma, h2=inst.h2,
                       gamma_bracket=[lo, hi])
        return inst.potential, derived
    if kind == "opt":
        if p.center is not None:
            center, count = np.asarray(p.center, dtype=float), None
        else:
            center, count = _planted_center(p, spec.seed)
        inst = instances.build_opt_instance(center, p.L, p.m, p.R, p.eps)
        derived = {"d": p.d, "r": inst.r, "center": center.tolist(), "lattice_size": count}
        return inst.potential, derived
    raise DomainError(f"unknown kind {kind}")


def spec_dict(spec):
    return spec.model_dump(mode="json")

