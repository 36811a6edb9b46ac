"""Ablation table on the desk dataset (reuses the cache of desk_rom.py)."""
import sys

from tactile_rom import experiment as ex

root = sys.argv[1] if len(sys.argv) > 1 else "desk_cache"
data = ex.ensure_dataset(root + "/desk")
rows = []
for name in ex.VARIANTS:
    params, enc, _ = ex.ensure_model(root + "/models", data, name)
    scores, wall, rss = ex.evaluate_heldout(data, params, enc)
    rows.append((name, ex.summarize(scores), wall))

full = rows[0][1]["rom_mean"]
print("%-18s %12s %8s %10s" % ("method", "chamfer mm^2", "vs full", "rollout s"))
for name, s, wall in rows:
    print("%-18s %12.3e %8.2f %10.0f" % (name, s["rom_mean"], s["rom_mean"] / full, wall))
print("%-18s %12.3e" % ("coarse upsampled", rows[0][1]["coarse_mean"]))
