"""Tour of the calibrated cost model.

Loads the three bundled profiles, reproduces their reference single-request
latencies, and walks through what the tables imply: how latency scales with
sequence lengths and batch size, what serving throughput each parallel shape
reaches, and what a cold restart costs relative to context migration.
"""

from spotsim import (
    ParallelConfig,
    exec_latency,
    exec_latency_exact,
    bundled_path,
    load_profile,
    restart_cost,
    throughput,
)

print("=== Single-request calibration anchors (S_in=512, S_out=128, B=1) ===")
anchors = [
    ("opt-6.7b", (1, 1, 4, 1), 5.447),
    ("gpt-20b", (1, 3, 4, 1), 14.373),
    ("llama-30b", (1, 2, 8, 1), 17.540),
]
for name, shape, reference in anchors:
    prof = load_profile(bundled_path(name))
    got = exec_latency(prof, ParallelConfig(*shape), 512, 128)
    print(f"  {name:<10} {shape}  model: {got:7.3f} s   reference: {reference} s")

prof = load_profile(bundled_path("gpt-20b"))

print("\n=== Decode steps are constant-cost thanks to the KV cache ===")
cfg = ParallelConfig(1, 3, 4, 1)
for s_out in (0, 32, 128, 256):
    print(f"  S_out={s_out:4d}  l_exe={exec_latency(prof, cfg, 512, s_out):8.3f} s")
exact = exec_latency_exact(prof, cfg, 512, 128)
print(f"  summation form agrees with the closed form: {exact:.6f} s")

print("\n=== Throughput/latency trade-off across parallel shapes (GPT-20B) ===")
print(f"  {'config':>14} {'GPUs':>5} {'l_exe(s)':>9} {'phi(req/s)':>11}")
for p, m, b in prof.shapes():
    for d in (1, 2):
        cfg = ParallelConfig(d, p, m, b)
        if cfg.gpus > 40:
            continue
        print(f"  {str(cfg):>14} {cfg.gpus:>5} "
              f"{exec_latency(prof, cfg, 512, 128):>9.2f} {throughput(prof, cfg):>11.3f}")

print("\n=== Recovery costs relative to an equivalent context migration ===")
base = prof.restart_baseline_s
print(f"  equivalent-migration baseline: {base:.1f} s")
print(f"  reload from local disk:  {restart_cost(prof, 'local_disk'):6.1f} s "
      f"({prof.local_restart_ratio}x)")
print(f"  reload from remote store: {restart_cost(prof, 'remote_storage'):5.1f} s "
      f"({prof.remote_restart_ratio}x)")
