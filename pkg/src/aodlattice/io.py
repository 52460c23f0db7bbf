"""File formats: scene interchange, truth sidecars, traces, metrics, manifests.

A scene directory holds scene.json (dimensions, channel mask, component
library records, forward-table parameters) plus radiance.csv, a headerless
P x C matrix, row-major in region index with channel columns ascending.
The truth sidecar truth.csv carries tau and the theta row per region.
Floats are written with repr (shortest round-trip), so identical runs
produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .baselines import MetricsReport
from .forward import ComponentLibrary, build_synthetic_table, default_library
from .model import ConfigurationError, Scene

SCENE_JSON = "scene.json"
RADIANCE_CSV = "radiance.csv"
TRUTH_CSV = "truth.csv"


def _fmt(x) -> str:
    return repr(float(x))


def write_matrix_csv(path, array: np.ndarray) -> None:
    array = np.atleast_2d(np.asarray(array, dtype=float))
    with open(path, "w") as fh:
        for row in array:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def save_scene(
    directory,
    scene: Scene,
    library: ComponentLibrary,
    table_params: dict,
    noise_level: float = 0.0,
) -> None:
    """Write scene.json + radiance.csv into `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "aodlattice-scene/1",
        "width": scene.width,
        "height": scene.height,
        "channels": scene.channels,
        "region_size_km": scene.region_size_km,
        "channel_mask": [bool(b) for b in scene.channel_mask],
        "component_library": library.to_records(),
        "table": {
            "knots": int(table_params.get("knots", 25)),
            "tau_max": float(table_params.get("tau_max", 6.0)),
            "seed": int(table_params.get("seed", 0)),
            "channels": scene.channels,
        },
        "noise_level": float(noise_level),
        "radiance_csv": RADIANCE_CSV,
    }
    with open(directory / SCENE_JSON, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_matrix_csv(directory / RADIANCE_CSV, scene.radiance)


def load_scene(directory):
    """Read a scene directory; returns (Scene, ComponentLibrary, table).

    The forward table is rebuilt deterministically from the parameters
    recorded in scene.json, so a retrieval sees the exact forward model
    the scene was rendered with.
    """
    directory = Path(directory)
    meta_path = directory / SCENE_JSON
    if not meta_path.exists():
        raise ConfigurationError(f"missing {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format") != "aodlattice-scene/1":
        raise ConfigurationError(f"unrecognized scene format in {meta_path}")
    records = meta.get("component_library", "default")
    library = default_library() if records == "default" else ComponentLibrary.from_records(records)
    radiance = read_matrix_csv(directory / meta.get("radiance_csv", RADIANCE_CSV))
    scene = Scene(
        width=int(meta["width"]),
        height=int(meta["height"]),
        channels=int(meta["channels"]),
        radiance=radiance,
        channel_mask=np.asarray(meta["channel_mask"], dtype=bool),
        region_size_km=float(meta.get("region_size_km", 4.4)),
    )
    scene.validate()
    t = meta["table"]
    table = build_synthetic_table(
        library,
        channels=int(t.get("channels", scene.channels)),
        knots=int(t["knots"]),
        tau_max=float(t["tau_max"]),
        seed=int(t["seed"]),
    )
    return scene, library, table


def save_truth(directory, truth_tau: np.ndarray, truth_theta: np.ndarray) -> None:
    """Truth sidecar: header tau,theta_1..theta_M; one row per region."""
    directory = Path(directory)
    M = truth_theta.shape[1]
    with open(directory / TRUTH_CSV, "w") as fh:
        fh.write("tau," + ",".join(f"theta_{m + 1}" for m in range(M)) + "\n")
        for t, row in zip(truth_tau, truth_theta):
            fh.write(_fmt(t) + "," + ",".join(_fmt(v) for v in row) + "\n")


def load_truth(directory):
    directory = Path(directory)
    path = directory / TRUTH_CSV
    if not path.exists():
        return None
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]


def save_trace(path, trace) -> None:
    """SweepTrace CSV: sweep, log_posterior, accept rates, kappa, elapsed_ms."""
    with open(path, "w") as fh:
        fh.write("sweep,log_posterior,tau_accept_rate,theta_accept_rate,kappa,elapsed_ms\n")
        for sweep, lp, tar, har, kappa, ms in trace.rows():
            fh.write(
                f"{sweep},{_fmt(lp)},{_fmt(tar)},{_fmt(har)},{_fmt(kappa)},{_fmt(ms)}\n"
            )


def save_speedup(path, record) -> None:
    with open(path, "w") as fh:
        fh.write("n_patches,sweep,elapsed_ms\n")
        for n, sweep, ms in record.rows:
            fh.write(f"{n},{sweep},{_fmt(ms)}\n")


def save_slice(directory, values: np.ndarray, tau_axis: np.ndarray,
               theta_axis: np.ndarray, stem: str = "slice") -> None:
    """Posterior slice export: value matrix plus the two axis files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(directory / f"{stem}.csv", values)
    write_matrix_csv(directory / f"{stem}_tau_axis.csv", np.reshape(tau_axis, (-1, 1)))
    write_matrix_csv(directory / f"{stem}_theta_axis.csv", np.reshape(theta_axis, (-1, 1)))


def load_slice(directory, stem: str = "slice"):
    directory = Path(directory)
    values = read_matrix_csv(directory / f"{stem}.csv")
    tau_axis = read_matrix_csv(directory / f"{stem}_tau_axis.csv").ravel()
    theta_axis = read_matrix_csv(directory / f"{stem}_theta_axis.csv").ravel()
    return values, tau_axis, theta_axis


def save_metrics(path, report: MetricsReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def config_hash(config_dict: dict) -> str:
    canon = json.dumps(config_dict, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(path, config_dict: dict, seed: int, timings_ms: dict) -> None:
    """Run provenance: resolved config, its hash, versions, timings."""
    from . import __version__

    manifest = {
        "config": config_dict,
        "config_hash": config_hash(config_dict),
        "seed": seed,
        "versions": {
            "aodlattice": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "timings_ms": timings_ms,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
