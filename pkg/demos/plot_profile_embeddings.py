"""
What the profile embedding learns
=================================

After training, the profile branch maps each of the 16 possible profile
codes to a point in a 16-dimensional space. This walk-through trains a small
conditioned model, projects the per-subject embeddings with t-SNE and counts
how subjects group by profile.
"""

######################################################################
# A small conditioned model
# -------------------------

from eegcond.analysis import TsneConfig, cluster_report, collect_embeddings, run_tsne
from eegcond.dataset import SyntheticSpec, generate_synthetic, split_subjects
from eegcond.models import ModelSpec
from eegcond.plots import scatter_svg
from eegcond.preprocess import preprocess_pipeline
from eegcond.training import TrainConfig, split_sets, train

pre = preprocess_pipeline(generate_synthetic(SyntheticSpec(n_subjects=12,
                                                           epochs_per_subject=60)))
split = split_subjects(pre, n_unseen=3, seed=0)
sets = split_sets(pre, split)
spec = ModelSpec("lstm", use_ids=True, n_channels=pre.n_channels)
model, hist = train(spec, sets["train"], TrainConfig(max_epochs=5))
print(f"trained for {hist.n_epochs} epochs")

######################################################################
# Embedding and projection
# ------------------------
# Subjects with the same profile share an embedding row, and t-SNE keeps
# them on a single point.

E = collect_embeddings(model, pre.profiles, split.unseen_ids)
res = run_tsne(E.rows, TsneConfig(perplexity=3.0))
print(f"KL divergence {res.kl_initial:.3f} -> {res.kl_final:.3f}")

report = cluster_report(E)
print(f"{report.n_observed} of {report.n_possible} codes observed, "
      f"{report.n_prominent} shared by two or more subjects")
for code, members in report.membership.items():
    print(f"  {code}: {', '.join(members)}")
for sid, code in report.unseen_nearest.items():
    print(f"  unseen {sid} sits nearest to training code {code}")

######################################################################
# A picture
# ---------

groups = ["".join(str(int(b)) for b in c) for c in E.codes]
svg = scatter_svg(res.embedding, E.row_ids, groups, list(E.unseen), title="Subject embeddings")
with open("profile_embeddings.svg", "w") as fh:
    fh.write(svg)
print("wrote profile_embeddings.svg")
