import os
import sys

from dotenv import load_dotenv

# Make ``src.stability_core`` importable when run as ``python src/main.py``
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if project_root not in sys.path:
    sys.path.insert(0, project_root)

from src.stability_core.cli import main

# Load environment variables
load_dotenv()

if __name__ == "__main__":
    sys.exit(main())
