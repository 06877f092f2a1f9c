"""Flat key-value parameter file: defaults, loading and validation.

The file is YAML or JSON (JSON is valid YAML) holding a single mapping.
Unknown keys and wrong types are errors; missing keys take the defaults.
"""
import math
from pathlib import Path

import yaml

from .alignment import SolverConfig
from .errors import ParamsError
from .update import UpdateConfig

# key: (default, type, description)
SCHEMA = {
    # measurement
    "voxel_size": (0.005, float, "TSDF voxel edge (m)"),
    "trunc_voxels": (4.0, float, "TSDF truncation in voxels"),
    "w_max": (64.0, float, "TSDF weight cap"),
    "volume_margin": (0.10, float, "margin around the scene bounds for the TSDF grid (m)"),
    "max_view_angle": (70.0, float, "view-angle filter cutoff (degrees)"),
    "noise_sigma": (-1.0, float, "depth noise sigma (m); negative means use the scene's value"),
    # graph
    "k": (8, int, "kNN list length"),
    "k_prime": (4, int, "nodes blended per surfel"),
    "r_sample": (0.025, float, "node sampling radius (m)"),
    "delta_factor": (2.0, float, "node influence radius as a multiple of r_sample"),
    # alignment
    "lambda": (0.1, float, "regularisation weight"),
    "max_iterations": (8, int, "Gauss-Newton iterations per round"),
    "mu": (1e-4, float, "initial LM damping"),
    "tol": (1e-4, float, "relative energy decrease for convergence"),
    "sigma": (2, int, "correspondence search half window (px)"),
    "gamma_distance": (0.03, float, "max correspondence distance (m)"),
    "gamma_normal": (math.cos(math.radians(30.0)), float, "min normal dot product"),
    "align_rounds": (2, int, "correspondence/solve rounds per frame"),
    "max_retries": (3, int, "consecutive failed linear solves before divergence"),
    "cg_tol": (1e-3, float, "relative residual at which the inner conjugate-gradient solve stops"),
    # update
    "gamma_nn": (0.05, float, "max distance from an appended surfel to its nearest node (m)"),
    "gamma_inlier": (0.01, float, "free-space and duplicate-surface margin (m)"),
    "gamma_upper": (0.10, float, "compression: historical distance above (m)"),
    "gamma_lower": (0.02, float, "compression: current distance below (m)"),
    "gamma_remove": (20, int, "removed surfels per node and frame that delete the node"),
    "t_stale": (30, int, "frames before an unstable surfel is removed"),
    "conf_stable": (10.0, float, "confidence of a stable surfel"),
    "prune_emptied": (True, bool, "delete a node once its last supported surfel is removed"),
    # export / reporting
    "dh_floor": (0.01, float, "graph export lists d_h only where it exceeds the current distance by more (m)"),
    "min_object_surfels": (1, int, "objects with fewer surfels are not counted in metrics"),
}


def defaults():
    return {k: v[0] for k, v in SCHEMA.items()}


def validate(params):
    """Return a complete, type-checked copy of ``params``; raise ParamsError."""
    if not isinstance(params, dict):
        raise ParamsError("parameter file must hold a mapping")
    out = defaults()
    for key, val in params.items():
        if key not in SCHEMA:
            raise ParamsError(f"unknown parameter {key!r}")
        typ = SCHEMA[key][1]
        if typ is bool:
            if not isinstance(val, bool):
                raise ParamsError(f"{key}: expected true/false, got {val!r}")
            out[key] = val
            continue
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ParamsError(f"{key}: expected a number, got {val!r}")
        if typ is int and float(val) != int(val):
            raise ParamsError(f"{key}: expected an integer, got {val!r}")
        out[key] = typ(val)
        if not math.isfinite(out[key]):
            raise ParamsError(f"{key}: must be finite")
    positive = ["voxel_size", "trunc_voxels", "w_max", "r_sample", "delta_factor", "mu", "tol", "gamma_distance",
                "gamma_nn", "gamma_inlier", "gamma_upper", "gamma_lower"]
    for key in positive:
        if out[key] <= 0:
            raise ParamsError(f"{key} must be positive")
    for key in ["k", "k_prime", "max_iterations", "align_rounds", "gamma_remove", "min_object_surfels"]:
        if out[key] < 1:
            raise ParamsError(f"{key} must be >= 1")
    if out["k_prime"] > out["k"]:
        raise ParamsError("k_prime must not exceed k")
    if out["lambda"] < 0:
        raise ParamsError("lambda must be >= 0")
    if not 0 < out["cg_tol"] < 1:
        raise ParamsError("cg_tol must be in (0, 1)")
    if not out["gamma_lower"] < out["gamma_upper"]:
        raise ParamsError("gamma_lower must be smaller than gamma_upper")
    if not -1.0 <= out["gamma_normal"] <= 1.0:
        raise ParamsError("gamma_normal is a cosine in [-1, 1]")
    if not 0 < out["max_view_angle"] <= 90:
        raise ParamsError("max_view_angle must be in (0, 90]")
    if out["sigma"] < 0 or out["max_retries"] < 0 or out["t_stale"] < 0:
        raise ParamsError("sigma, max_retries and t_stale must be >= 0")
    return out


def load(path=None):
    """Load and validate a parameter file; ``None`` gives the defaults."""
    if path is None:
        return defaults()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParamsError(f"cannot read parameter file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParamsError(f"malformed parameter file {path}: {exc}") from exc
    return validate({} if data is None else data)


def solver_config(p):
    return SolverConfig(lam=p["lambda"], max_iterations=p["max_iterations"], mu=p["mu"], tol=p["tol"],
                        sigma=p["sigma"], gamma_distance=p["gamma_distance"], gamma_normal=p["gamma_normal"],
                        rounds=p["align_rounds"], max_retries=p["max_retries"], cg_tol=p["cg_tol"])


def update_config(p):
    return UpdateConfig(gamma_distance=p["gamma_distance"], gamma_normal=p["gamma_normal"], gamma_nn=p["gamma_nn"],
                        gamma_inlier=p["gamma_inlier"], gamma_upper=p["gamma_upper"], gamma_lower=p["gamma_lower"],
                        gamma_remove=p["gamma_remove"], r_sample=p["r_sample"], t_stale=p["t_stale"],
                        conf_stable=p["conf_stable"], delta_factor=p["delta_factor"],
                        prune_emptied=p["prune_emptied"])
