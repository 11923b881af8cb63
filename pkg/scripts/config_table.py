"""Print parameter counts, sequence lengths and MACs for the named configurations."""
from mlpmixer.model import NAMED_CONFIGS, flops_per_image, param_count

print(f"{'name':<12}{'params':>14}{'M':>6}{'S':>6}{'GMACs':>10}")
for name, cfg in NAMED_CONFIGS.items():
    n = param_count(cfg)
    print(f"{name:<12}{n:>14,}{round(n / 1e6):>6}{cfg.seq_len:>6}{flops_per_image(cfg) / 1e9:>10.3f}")
