"""Press a sphere into the desk-scale elastomer and look at it through the sensor.

Runs the fine MPM solver for a handful of frames, then renders the apparent
depth of the deformed top face.  Takes about a minute.
"""
import sys

import numpy as np

from tactile_rom.mpm import elastomer_box, particle_spacing, run_press_scenario
from tactile_rom.render import extract_surface, render_depth_map, sensor_for_box, write_depth
from tactile_rom.trainer import desk_configs, desk_indenter

out = sys.argv[1] if len(sys.argv) > 1 else "press"
fine, _ = desk_configs()
cfg = fine.with_(indenter=desk_indenter(4e-4), frames=8)
# the press reaches full depth after depth / speed seconds
print("frame dt %.2e s, %d steps per frame" % (cfg.frame_dt, cfg.frame_steps))

tr = run_press_scenario(cfg)
top = tr.rest[:, 2] > tr.rest[:, 2].max() - 0.5 * particle_spacing(cfg)[2]
drop = tr.rest[top, 2] - tr.x[:, top, 2]
for k in range(len(tr.times)):
    print("t=%.4f s  indenter z=%.5f m  max surface drop %.1f um"
          % (tr.times[k], tr.poses[k, 2], 1e6 * drop[k].max()))

# %%
# the sensor looks up through the elastomer at the top face
lo, hi = elastomer_box(cfg)
sensor = sensor_for_box(lo, hi)
surf = extract_surface(tr.x[-1].astype(np.float64), tr.rest)
dm = render_depth_map(surf, sensor)
v = dm.values[dm.valid]
print("depth map %dx%d, %.0f%% covered, range %.3f..%.3f mm"
      % (dm.values.shape[1], dm.values.shape[0], 100 * dm.valid.mean(), 1e3 * v.min(), 1e3 * v.max()))
write_depth(out, dm)
print("wrote %s.depth.f32 / .png" % out)
