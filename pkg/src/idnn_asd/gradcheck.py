"""Randomized finite-difference checks of every loss form.

Four loss forms exist: plain reconstruction (ae), reconstruction plus KL
(vae), centre-frame interpolation (idnn) and next-frame prediction (pdnn).
Each check draws a small random network and a batch of windows cut from a
random spectrogram, then compares analytic and central-difference gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Spectrogram
from .models import build_network
from .neuralnet import grad_check, relu_margin
from .seeding import derive_seed
from .windowing import Regime, make_windows

LOSS_FORMS = {
    "ae": (Regime.RECONSTRUCT_ALL, False),
    "vae": (Regime.RECONSTRUCT_ALL, True),
    "idnn": (Regime.INTERPOLATE_CENTER, False),
    "pdnn": (Regime.PREDICT_NEXT, False),
}
TOLERANCE = 1e-4
STEP = 1e-4
MIN_MARGIN = 1e-2


@dataclass(frozen=True)
class GradCheckRow:
    loss: str
    networks: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def random_case(rng: np.random.Generator, loss: str):
    """(network, inputs, targets, kl_weight, noise) for one small random problem.

    Redraws until every ReLU pre-activation is at least ``MIN_MARGIN`` away
    from the kink, so the finite difference never straddles it.
    """
    regime, variational = LOSS_FORMS[loss]
    while True:
        n_mels = int(rng.integers(2, 5))
        n = 3
        frames = rng.normal(size=(int(rng.integers(n + 1, n + 4)), n_mels))
        ws = make_windows(Spectrogram(frames), n, regime)
        x = ws.inputs.astype(np.float64)
        t = ws.targets.astype(np.float64)
        latent = int(rng.integers(1, 4))
        encoder = (int(rng.integers(2, 6)), latent)
        decoder = (int(rng.integers(2, 6)),)
        net = build_network(x.shape[1], t.shape[1], rng, variational, encoder, decoder, np.float64)
        noise = rng.standard_normal((x.shape[0], latent)) if variational else None
        kl_weight = float(rng.uniform(0.01, 1.0)) if variational else 0.0
        if relu_margin(net, x, noise) > MIN_MARGIN:
            return net, x, t, kl_weight, noise


def check_loss_form(loss: str, n_networks: int = 20, seed: int = 0, corrupt: float = 0.0) -> GradCheckRow:
    rng = np.random.default_rng(derive_seed(seed, "gradcheck", loss))
    worst = 0.0
    for _ in range(n_networks):
        net, x, t, kl_weight, noise = random_case(rng, loss)
        worst = max(worst, grad_check(net, x, t, kl_weight, noise, STEP, corrupt))
    return GradCheckRow(loss, n_networks, float(worst))


def run_gradcheck(n_networks: int = 20, seed: int = 0, corrupt: float = 0.0) -> list[GradCheckRow]:
    """One row per loss form, in ``LOSS_FORMS`` order."""
    return [check_loss_form(loss, n_networks, seed, corrupt) for loss in LOSS_FORMS]
