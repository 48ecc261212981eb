from . import config


class Client:
    def __init__(self, overrides):
        self.settings = config.merged(overrides)

    def timeout(self):
        return config.lookup(self.settings, "timeout")

    def connect(self):
        limit = self.timeout()
        return "connected within %s" % limit
