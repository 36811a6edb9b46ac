"""Desk-scale ROM: paired dataset, training, held-out rollouts.

Everything is cached under the directory given as the first argument, so a
second run only repeats the evaluation.  The first run needs roughly 40 min
of data generation and 15 min of training per model.
"""
import sys

from tactile_rom import experiment as ex

root = sys.argv[1] if len(sys.argv) > 1 else "desk_cache"
data = ex.ensure_dataset(root + "/desk")
print("%d scenarios, %d fine / %d coarse particles, train ids %s"
      % (len(data.scenarios), data.encoding.n, len(data.coarse_rest), data.train_ids))

params, enc, meta = ex.ensure_model(root + "/models", data, "full")
print("checkpoint from epoch", meta.get("best_epoch"))

# %%
# roll the ROM forward on each held-out press and compare surfaces with the
# fine solver, next to the grid-upsampled coarse solution
scores, wall, rss = ex.evaluate_heldout(data, params, enc)
s = ex.summarize(scores)
print("held-out frames:", s["frames"])
print("ROM    chamfer %.3e mm^2" % s["rom_mean"])
print("coarse chamfer %.3e mm^2" % s["coarse_mean"])
print("mean per-frame ratio %.3f, frames within 0.6x: %.1f%%"
      % (s["ratio_mean"], 100 * s["frac_within_0.6"]))
print("rollout wall %.0f s, peak RSS %.0f MiB" % (wall, rss))

by = {}
for f in scores:
    by.setdefault(f.scenario, []).append(f.rom / f.coarse)
for sid, r in sorted(by.items()):
    print("scenario %d: median ratio %.2f over %d frames" % (sid, sorted(r)[len(r) // 2], len(r)))
