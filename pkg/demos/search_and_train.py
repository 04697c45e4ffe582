# %% [markdown]
# # A small joint search
#
# HyperBand races spiral configurations. Each trial grids the phantoms with
# its trajectory and trains a denoiser on them, and the validation SSIM
# decides which trials get more epochs. The search below is tiny so that it
# finishes in a few minutes; `tests/desk.py` runs the full desk-scale study.

# %%
import tempfile
from pathlib import Path

import numpy as np

from spiralforge import hyperband, phantom, trajgen

system = trajgen.desk_system()
ph = phantom.make_phantoms(24, seed=0, T=7, H=32, W=32, n_coils=4)
search = phantom.split_indices(ph.n_series, phantom.SEARCH_SPLIT, seed=0)
used = np.concatenate([search["train"], search["val"]])
local = {"train": np.arange(len(search["train"])), "val": np.arange(len(search["train"]), len(used))}

# %%
params = hyperband.HyperBandParams(R=3, eta=3, seed=0)
for br in hyperband.schedule(params):
    print(br.to_dict())
print(hyperband.schedule_totals(hyperband.schedule(params)))

# %%
work = Path(tempfile.mkdtemp())
evaluator = hyperband.DenoiserEvaluator(ph.subset(used), local, system, widths=(4, 8, 8), batch=4)
found = hyperband.run_search(hyperband.SearchSpace(), params, evaluator, work / "search", system=system, log=print)
print("best", found.best_config, round(found.best_score, 4))

# %% [markdown]
# Interrupted searches resume from the ledger; a finished ledger simply
# reproduces the same report.

# %%
again = hyperband.run_search(hyperband.SearchSpace(), params, evaluator, work / "search", system=system, resume=True)
print(again.best_trial == found.best_trial)

# %% [markdown]
# Retrain the winner from scratch on the final split and score the test series.

# %%
splits = phantom.split_indices(ph.n_series, phantom.FINAL_SPLIT, seed=0)
res = hyperband.finalize(found.best_config, ph, splits, system, epochs=10, widths=(4, 8, 8), batch=4)
print(res.report.to_json())
