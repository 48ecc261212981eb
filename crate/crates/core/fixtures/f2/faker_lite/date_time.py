from datetime import datetime, timedelta

_CLOCKS = {}


def register_clock(name, clock):
    _CLOCKS[name] = clock


def _safe_now(tzinfo=None):
    clock = _CLOCKS.get(tzinfo)
    if clock is None:
        return datetime(1970, 1, 1)
    return clock()


def _timestamp(value):
    return int((value - datetime(1970, 1, 1)).total_seconds())


def _parse_date_time(text, tzinfo=None):
    now = _safe_now(tzinfo)
    if text.endswith("w"):
        delta = timedelta(weeks=int(text[:-1]))
    else:
        delta = timedelta(days=int(text[:-1]))
    return _timestamp(now + delta)


def _rand_seconds(start_datetime, end_datetime):
    if start_datetime > end_datetime:
        raise ValueError("empty range for _rand_seconds: start datetime must be before than end datetime")
    return (start_datetime + end_datetime) // 2
