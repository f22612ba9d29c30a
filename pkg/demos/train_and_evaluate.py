"""Train a small network on synthetic pits and report MIoU per density state.

Run: python3 demos/train_and_evaluate.py   (about half a minute on one core)
"""
import numpy as np

from hdvnet.density import calibrate_states, density_profile
from hdvnet.infer import predict_scene
from hdvnet.metrics import per_density_report
from hdvnet.model import HDVNet, HdvConfig
from hdvnet.scene import generate_scene, mine_scene_spec
from hdvnet.train import Scene, TrainConfig, finetune_final, train_backbone

COUNTS = (512, 128, 32, 8, 4)
clouds = [generate_scene(mine_scene_spec(s), seed=s) for s in range(5)]
profiles = [density_profile(c, k=16, jitter=True) for c in clouds]
thresholds = calibrate_states(profiles[:4], np.array(COUNTS) / COUNTS[0])
scenes = [Scene.build(c, thresholds, p, preprocess=True) for c, p in zip(clouds, profiles)]
train, test = scenes[:4], scenes[4]

model = HDVNet(HdvConfig(counts=COUNTS), seed=0)
print("backbone parameters:", model.count_parameters(backbone_only=True))
log = train_backbone(model, train, TrainConfig(epochs=4, batches_per_epoch=15))
by_epoch = {}
for r in log.records:
    by_epoch.setdefault(r["epoch"], []).append(r["L_total"])
print("mean backbone loss by epoch:", [round(float(np.mean(v)), 3) for v in by_epoch.values()])
finetune_final(model, train, TrainConfig(epochs=2, batches_per_epoch=15))

pred, _ = predict_scene(model, test, seed=0, mode="final")
table = per_density_report(pred, test.cloud.labels, test.states, class_count=test.cloud.class_count)
print(table.to_markdown("demo"))
