import numpy as np
import pytest
import torch
from PIL import Image

FEATURE_DIM = 16
IMAGE_SIZE = 32


class TinyEncoder(torch.nn.Module):
    """Small stand-in image encoder with declared eval preprocessing."""

    def __init__(self):
        super().__init__()
        self.image_size = IMAGE_SIZE
        self.mean = [0.5, 0.5, 0.5]
        self.std = [0.5, 0.5, 0.5]
        self.conv = torch.nn.Conv2d(3, 8, kernel_size=3, stride=2)
        self.fc = torch.nn.Linear(8, FEATURE_DIM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.conv(x))
        h = h.mean(dim=(2, 3))
        return self.fc(h)


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory):
    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("ckpt") / "tiny.pt"
    torch.jit.script(TinyEncoder()).save(str(path))
    return str(path)


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    """Ten decodable PNGs: 2 classes x 5 samples with a per-class color bias."""
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(7)
    for class_id in range(2):
        for sample_id in range(5):
            pixels = rng.integers(0, 128, size=(40, 48, 3), dtype=np.uint8)
            pixels[..., class_id] += 100
            Image.fromarray(pixels, "RGB").save(root / f"c{class_id}_s{sample_id}.png")
    return root


@pytest.fixture
def manifest(image_dir, tmp_path):
    path = tmp_path / "manifest.tsv"
    lines = ["# path\tclass_id\tsample_id\tlabel"]
    for class_id, label in ((0, "red widget"), (1, "green widget")):
        for sample_id in range(5):
            lines.append(f"{image_dir}/c{class_id}_s{sample_id}.png"
                         f"\t{class_id}\t{sample_id}\t{label}")
    path.write_text("\n".join(lines) + "\n")
    return str(path)
