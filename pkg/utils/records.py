""" Line-delimited JSON records: traces, spills, tables and timelines """
import json
import sys
from contextlib import contextmanager


def dumps(record):
    return json.dumps(record, sort_keys=True)


@contextmanager
def open_sink(path=None, mode='w'):
    """Yields a writable text stream, stdout when no path is given"""
    if path is None:
        yield sys.stdout
        return
    with open(path, mode, encoding='utf-8') as f:
        yield f


def write_records(records, path=None, mode='w'):
    with open_sink(path, mode) as f:
        for record in records:
            f.write(dumps(record) + '\n')
        f.flush()


def read_records(path):
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]
