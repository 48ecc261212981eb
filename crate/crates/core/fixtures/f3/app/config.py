DEFAULTS = {"retries": 3, "backoff": 0.5}


def merged(overrides):
    settings = dict(DEFAULTS)
    settings.update(overrides)
    return settings


def lookup(settings, key):
    section = settings
    return section[key]
