import numpy as np
import pytest

from owqf.model import Detector, ModelConfig
from owqf.world import CategoryTable, World, generate_scene


class Toy:
    """A small world, one scene and a d=16, 2-layer detector."""

    def __init__(self, seed=0, n_objects=3, layers=2):
        self.table = CategoryTable.build((2, 2, 2), 8, seed)
        self.world = World(self.table, d=16, seed=seed)
        self.scene = generate_scene(seed + 5, n_objects, table=self.table, image_id=seed)
        self.fp = self.world.render(self.scene)
        self.cfg = ModelConfig(dim=16, heads=2, layers=layers, d_text=8, n_learnable=12, n_specific=6)
        self.model = Detector(self.cfg, seed=seed)
        rng = np.random.default_rng(seed + 100)
        # nonzero box heads so boxes actually move
        for layer in self.model.decoder.layers:
            for head in (layer.box_head_general, layer.box_head_specific):
                head.fc2.weight.data = rng.normal(0, 0.05, head.fc2.weight.shape)
        self.model.builder.point_box_head.fc2.weight.data = rng.normal(0, 0.05, (16, 4))


@pytest.fixture
def toy():
    return Toy()


# acceptance criterion number -> pass/fail line, filled by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
