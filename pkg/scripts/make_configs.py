"""Regenerate the example configs in configs/."""

import warnings
from pathlib import Path

from mixrel.sim.config import SimConfig
from mixrel.sim.scenarios import adversarial_scenario, assign_unreliable_profile

OUT = Path(__file__).resolve().parent.parent / "configs"


def main():
    OUT.mkdir(exist_ok=True)
    base = SimConfig(W=80, W_G=80, clients=100, epoch_seconds=3600.0, p_lot=0.25,
                     crypto_mode="fast", seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        unreliable = assign_unreliable_profile(base).with_measurements(100_000)
    adv = SimConfig(W=20, W_G=20, clients=100, epoch_seconds=3600.0, p_lot=0.8,
                    crypto_mode="fast", seed=100).with_measurements(200_000)
    adv = adversarial_scenario(adv, 8, 8, "targets-after")
    for name, cfg in (("unreliable_100k.json", unreliable), ("adversarial_A8_T8.json", adv)):
        (OUT / name).write_text(cfg.dumps() + "\n", encoding="utf-8")
        print(f"{name}: {cfg.expected_measurements:.0f} expected measurements")


if __name__ == "__main__":
    main()
