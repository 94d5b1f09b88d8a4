import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from radarfuse.core import FusionConfig  # noqa: E402
from radarfuse.fusion.layers import DecoderParams  # noqa: E402
from radarfuse.world.scene import ScenarioConfig, WeatherNoise, generate_scene  # noqa: E402

SMALL = FusionConfig(num_agent_anchors=40, num_map_anchors=10, num_decoder_layers=2)


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def small_decoder():
    return DecoderParams.init(SMALL, seed=3)


@pytest.fixture(scope="session")
def scene():
    return generate_scene(ScenarioConfig(seed=7, num_agents=5, scene_duration=2.0, map_template="T-junction",
                                         weather=WeatherNoise(0.05, 0.05, 0.05)))


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
