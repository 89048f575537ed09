import sys


def echo(message=None, file=None, nl=True):
    out = file or sys.stdout
    if message is not None:
        out.write(str(message))
    if nl:
        out.write("\n")
