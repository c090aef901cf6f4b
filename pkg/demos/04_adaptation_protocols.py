"""Single-source vs source-combined vs multi-source, on a reduced budget.

Trains three protocols toward one held-out target domain and prints the
resulting target accuracies side by side. Uses smaller datasets and fewer
epochs than the defaults so it finishes in about a minute; expect the
multi-source row to lead, but with more spread than the full benchmark.

Run:  python demos/04_adaptation_protocols.py
"""

from msdalab.data import default_roster, generate_domain, split, strip_labels
from msdalab.model import build_model
from msdalab.trainer import (
    HyperParams,
    evaluate,
    train_multi_source,
    train_single_source,
    train_source_combined,
)

TARGET = "Os"
SOURCES = ["Ab", "Bu"]
N = 400
hp = HyperParams(epochs=6, seed=0)

roster = {s.name: s for s in default_roster()}
data = {name: generate_domain(roster[name], N, hp.seed) for name in SOURCES + [TARGET]}
target_train, _, target_test = split(data[TARGET], hp.seed, stratified=False)
target_unlabeled = strip_labels(target_train)

print(f"target: {TARGET}   sources: {SOURCES}   n={N}/domain   epochs={hp.epochs}")
print()

model = build_model(1, 2, seed=hp.seed)
report = train_single_source(model, data[SOURCES[0]], target_unlabeled, hp)
acc_single = evaluate(model, target_test)
print(f"single   ({SOURCES[0]:>6s})        target accuracy {100 * acc_single:6.2f}%")

model = build_model(1, 2, seed=hp.seed)
train_source_combined(model, [data[s] for s in SOURCES], target_unlabeled, hp)
acc_comb = evaluate(model, target_test)
print(f"combined ({'+'.join(SOURCES):>6s})        target accuracy {100 * acc_comb:6.2f}%")

model = build_model(len(SOURCES), 2, seed=hp.seed)
report = train_multi_source(model, [data[s] for s in SOURCES], target_unlabeled, hp)
acc_multi = evaluate(model, target_test)
print(f"multi    ({'+'.join(SOURCES):>6s})        target accuracy {100 * acc_multi:6.2f}%")

print()
print("last-epoch loss components of the multi run:")
st = report.per_epoch[-1]
print(f"  cl={st.cl:.4f}  fd={st.fd:.4f}  cd={st.cd:.4f}  source-val={100 * st.val_accuracy:.1f}%")
