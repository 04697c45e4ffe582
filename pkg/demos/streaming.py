# %% [markdown]
# # Streaming reconstruction
#
# Frames are gridded, denoised over a five-frame window and emitted by three
# stages joined with bounded queues. In parallel mode the slowest stage sets
# the output period; in serial mode the stage times add up.

# %%
import numpy as np

from spiralforge import denoiser, nufft, phantom, stream, trajgen

model = denoiser.DenoiserModel.init(0, (2, 4, 4))
frames = np.random.default_rng(0).random((60, 16, 16))

# %%
for mode in ("parallel", "serial"):
    _, stats = stream.run_stream(stream.replay_source(frames), model, mode=mode,
                                 inject_grid_ms=33, inject_denoise_ms=19)
    text, _ = stream.latency_report(stats)
    print(text)

# %% [markdown]
# Streaming raw k-space gives the same bytes as gridding the series offline
# and sliding the denoiser over it.

# %%
T = 10
ph = phantom.make_phantoms(1, seed=1, T=T, H=32, W=32, n_coils=4)
traj = trajgen.assemble_trajectory(trajgen.optimized_config(), trajgen.desk_system(), T)
gridder = nufft.Gridder(traj, (32, 32))
model = denoiser.DenoiserModel.init(1, (8, 16, 32))
out, stats = stream.run_stream(stream.kspace_source(gridder, ph.truth[0], ph.maps[0]), model, gridder)
offline = denoiser.sliding_window_apply(model, nufft.grid_series(ph.truth[0], ph.maps[0], traj).data)
print(out.data.tobytes() == offline.data.tobytes())
print(stream.latency_report(stats)[0])
