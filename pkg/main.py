import sys

from cli import i3_main, sord_main

TOOLS = {"sord": sord_main, "i3": i3_main}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] not in TOOLS:
        print("usage: python main.py {sord,i3} <command> [options]", file=sys.stderr)
        return 1
    return TOOLS[argv[0]](argv[1:])


if __name__ == "__main__":
    sys.exit(main())
