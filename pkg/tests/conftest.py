import sys
from pathlib import Path

# make tests/helpers.py importable regardless of invocation directory
sys.path.insert(0, str(Path(__file__).parent))

from ttscorpus import sampler

# dataclass, not a test class, despite the Test* name
sampler.TestsetSpec.__test__ = False
