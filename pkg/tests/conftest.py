import numpy as np
import pytest

from fblalloc import channel, fbl_core
from fblalloc.config import SystemConfig, with_nodes
from fblalloc.errors import FblError


@pytest.fixture(scope="session")
def cfg() -> SystemConfig:
    """Reference configuration (all defaults)."""
    return SystemConfig().validate()


def draw_feasible_gains(cfg: SystemConfig, draw_index: int, salt: int = 777,
                        max_tries: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """One channel-model draw with every link solver-feasible.

    Draws whose links fall outside the reduced problem's domain (no
    admissible repetition count for any blocklength) are redrawn, since
    the network solver's contract requires feasible links.
    """
    for attempt in range(max_tries):
        ss = np.random.SeedSequence([salt, draw_index, attempt])
        topo_seed, fading_seed = ss.spawn(2)
        topology = channel.init_topology(cfg, topo_seed)
        fading = channel.step_small_scale(channel.init_fading(cfg, fading_seed))
        gains, c1 = channel.composite_gain(topology, fading, cfg)
        try:
            for v in c1:
                fbl_core.feasible_m_range(float(v), cfg)
        except FblError:
            continue
        return gains, c1
    raise RuntimeError(f"no feasible draw found for index {draw_index}")


def n_nodes(cfg: SystemConfig, n: int) -> SystemConfig:
    return with_nodes(cfg, n)
