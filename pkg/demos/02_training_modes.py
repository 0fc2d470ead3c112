"""All four training modes on the same seeded synthetic task.

classic     - every device trains the full model, weights averaged each round
split       - model cut at the offloading point; activations up, gradients down
local_loss  - device half trains against a local auxiliary head; no gradient
              ever comes back down
replay      - device half frozen after pretraining; quantized activations are
              sent every rho-th round and replayed from the server cache in
              between

Same seed, same data, same model everywhere, so the traffic and accuracy
columns are directly comparable.
"""

from sflsim import config, netsim, runtime

BASE = {
    "version": 1,
    "model": "tiny_vgg",
    "devices": 4,
    "rounds": 21,
    "lr": 0.1,
    "batch_size": 16,
    "pretrain_epochs": 2,
    "seed": 2024,
    "dataset": {"kind": "blobs", "per_class": 200, "noise_sigma": 0.05},
}

MODES = [
    ("classic", {"pretrain_epochs": 0}),
    ("split", {}),
    ("local_loss", {}),
    ("replay", {"rho": 3, "quantized": True}),
]


def main():
    print(f"{BASE['devices']} devices, {BASE['rounds']} rounds, "
          f"blobs with noise {BASE['dataset']['noise_sigma']}\n")
    print(f"{'mode':<12} {'final acc':>9} {'up MiB':>9} {'down MiB':>9} "
          f"{'round s (wifi)':>14}")
    for mode, extra in MODES:
        cfg = config.from_dict({**BASE, "mode": mode, **extra})
        out = runtime.run_training(cfg)
        up = out.state.ledger.total(direction="up") / 2**20
        down = out.state.ledger.total(direction="down") / 2**20
        latency = max(r.latency_s for r in out.results)
        print(f"{mode:<12} {out.results[-1].test_acc:>9.3f} {up:>9.2f} "
              f"{down:>9.2f} {latency:>14.4f}")

    print("\nper-round loss, cached-activation mode (transmission rounds "
          "marked *):")
    cfg = config.from_dict({**BASE, "mode": "replay", "rho": 3})
    out = runtime.run_training(cfg)
    for r in out.results:
        sent = out.state.ledger.total(
            direction="up", purpose="activation", round_index=r.t
        )
        mark = "*" if sent else " "
        mean_loss = sum(r.server_loss.values()) / len(r.server_loss)
        print(f"  round {r.t:>2}{mark} loss {mean_loss:.4f} "
              f"acc {r.test_acc:.3f} up {sent:>6} B")
    print("\nrounds without a star moved zero activation bytes - the server "
          "kept training from its cache.")


if __name__ == "__main__":
    main()
