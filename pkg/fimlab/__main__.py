"""
命令行入口：python -m fimlab <command> ...
"""

from fimlab.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
