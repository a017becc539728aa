"""Train a small teacher, distill it into 4 SuperTokens and compare probe accuracy.

Runs in under a minute on one core. Scale the config up for better numbers.
"""
from supertokens import DistillConfig, distill, generate_dataset, train_teacher
from supertokens.distill import probe_accuracy, student_features, teacher_features

cfg = DistillConfig(n_train=256, n_holdout=96, teacher_epochs=20, epochs=20,
                    unfreeze_epoch=14, warmup_epochs=2, seed=0)
train = generate_dataset(cfg.n_train, cfg.points, seed=cfg.seed)
holdout = generate_dataset(cfg.n_holdout, cfg.points, seed=cfg.seed + 1000)

print(f"teacher: {cfg.teacher_layers} blocks over {cfg.c} tokens of width {cfg.d}")
teacher = train_teacher(train, cfg)

result = distill(teacher, train, holdout, cfg)
print(f"student: {cfg.s} SuperTokens, {cfg.student_layers} blocks")
print(f"held-out reconstruction loss {result.initial_holdout:.4f} -> {result.final_holdout:.4f}")

for name, feats in [("teacher", lambda ds: teacher_features(teacher, ds)),
                    ("student", lambda ds: student_features(teacher, result.student, ds))]:
    acc = probe_accuracy(feats(train), train.labels, feats(holdout), holdout.labels)
    print(f"linear probe on frozen {name} features: {acc:.3f}")
