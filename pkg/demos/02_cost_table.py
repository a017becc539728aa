"""How the FLOPs of a full encoder compare with a SuperToken student.

The closed forms are checked against an instrumented forward pass at a small size.
"""
from supertokens.cost import CostConfig, breakdown, count_ops

base = dict(S=16, N=256, D=384, nh=6, L=12)
dense = breakdown(CostConfig(**base), "transformer").total
print(f"{'model':<26}{'GFLOPs':>10}{'vs dense':>10}")
print(f"{'transformer':<26}{dense / 1e9:>10.2f}{1.0:>10.2f}")
foundry = breakdown(CostConfig(**base)).total
print(f"{'foundry (S=16)':<26}{foundry / 1e9:>10.2f}{foundry / dense:>10.3f}")
for r in (0.0, 0.25, 0.5, 0.75, 1.0):
    total = breakdown(CostConfig.with_ratio(r, **base), "foundry_gate").total
    print(f"{f'foundry_gate r={r:.2f}':<26}{total / 1e9:>10.2f}{total / dense:>10.3f}")

small = CostConfig(S=4, N=16, D=32, nh=4, L=2, R=10)
closed, counted = breakdown(small, "foundry_gate"), count_ops(small, "foundry_gate")
print("\ncomponent       closed    counted")
for key, value in closed.as_dict().items():
    print(f"{key:<14}{value:>9}{counted.as_dict()[key]:>11}")
