import sys
from pathlib import Path

# 保证从任意目录运行 pytest 时都能 `import src`
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
