import sys
from pathlib import Path

import torch

# oracles.py lives next to the tests
sys.path.insert(0, str(Path(__file__).parent))

torch.manual_seed(0)
