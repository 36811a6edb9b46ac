import json
import sys

import pytest


TINY = dict(extents=[12e-3, 12e-3, 3e-3], n_fine=400, n_coarse=60)
TINY_INDENTER = {"radius": 4e-3, "depth": 2e-4, "speed": 1e-2}


def tiny_sim(resolution="coarse", frames=4):
    grid = ([16, 16, 10], 1.5e-3) if resolution == "fine" else ([12, 12, 9], 3e-3)
    return {"grid_dims": grid[0], "dx": grid[1], "resolution": resolution, "frames": frames,
            "indenter": dict(TINY_INDENTER), **TINY}


def write(path, obj):
    path.write_text(json.dumps(obj, indent=1))
    return path


@pytest.fixture(scope="session")
def tiny_configs(tmp_path_factory):
    """Config files for a complete small pipeline; paths refer to ``root``."""
    root = tmp_path_factory.mktemp("pipeline")
    c = {}
    c["simulate"] = write(root / "sim.json", tiny_sim("fine", 3))
    c["gen-data"] = write(root / "gen.json", {
        "fine": tiny_sim("fine"), "coarse": tiny_sim("coarse"), "frames": 4,
        "scenarios": [{"id": 0, "depth": 2e-4}, {"id": 1, "depth": 1.5e-4, "center": [1e-3, 0]},
                      {"id": 2, "depth": 1e-4, "center": [0, -1e-3]}],
        "train_ids": [0, 1]})
    c["train"] = write(root / "train.json", {
        "dataset": str(root / "data"), "val_ids": [2], "hidden": [16, 16], "latent": 4,
        "epochs": 3, "batch": 4, "lr": 1e-3})
    c["rollout"] = write(root / "rollout.json", {
        "checkpoint": str(root / "model" / "model.romw"), "coarse": tiny_sim("coarse"),
        "scenario": {"id": 5, "depth": 1.8e-4, "center": [5e-4, 5e-4]}, "frames": 3,
        "lbfgs": {"max_iters": 3}})
    c["render"] = write(root / "render.json", {
        "trajectory": str(root / "rollout" / "rollout.traj"), "sim": tiny_sim("fine"),
        "sensor": {"width": 64, "height": 48}})
    c["eval"] = write(root / "eval.json", {
        "pred": str(root / "render"), "ref": str(root / "render"), "kind": "depth"})
    c["eval-traj"] = write(root / "eval_traj.json", {
        "pred": str(root / "rollout" / "rollout.traj"),
        "ref": str(root / "rollout" / "rollout.traj"), "kind": "trajectory",
        "sim": tiny_sim("fine")})
    c["ablate"] = write(root / "ablate.json", {
        "dataset": str(root / "data"), "epochs": 2, "hidden": [16], "lbfgs": {"max_iters": 2}})
    return root, c


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.LINES):
        terminalreporter.write_line(line)
