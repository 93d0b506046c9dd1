"""
Training, ablations and smoothness
==================================

Train the full model and a few variants on the synthetic dataset with early
stopping on validation AUC, then compare test AUC and how spread out the
learned user representations are.  Takes about two minutes on one core.
"""

# %%
from hicon.data import synth_generate
from hicon.evaluation import angle_density_export
from hicon.training import TrainConfig, evaluate, node_representations, train

ds = synth_generate(seed=0)
variants = {
    "full": {},
    "w/o High": {"disable_high": True},
    "w/o CL": {"disable_cl": True},
    "recursive-6": {"recursive_depth": 6},
}

# %%
results = {}
for name, kw in variants.items():
    res = train(TrainConfig(seed=0, patience=20, **kw), ds)
    rep = evaluate(res.model, res.params, ds, band_edges=(0, 50, 100))
    results[name] = (res, rep)
    print(f"{name:12s} AUC {rep.auc:.4f}  F1 {rep.f1:.4f}  SMV users {rep.smv_users:.4f}  "
          f"best epoch {res.best_epoch}")

# %% Sparsity bands: AUC for less and more active users
for name, (_, rep) in results.items():
    print(name.ljust(12), {k: round(v.auc, 4) for k, v in rep.strata.items()})

# %% Angle density of user representations (flat = spread out, peaked = collapsed)
for name in ("full", "recursive-6"):
    res, _ = results[name]
    reps = res.model.represent(res.params)
    dens = angle_density_export(node_representations(reps, nodes="users"), bins=32)[:, 1]
    print(f"{name:12s} density max/min {dens.max():.2f} / {dens.min():.2f}")
