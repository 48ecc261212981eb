from . import date_time


class BaseProvider:
    start_datetime = 0

    def date_time(self, end_datetime="now", tzinfo=None):
        end = date_time._parse_date_time(end_datetime, tzinfo)
        return date_time._rand_seconds(self.start_datetime, end)


class Provider(BaseProvider):
    pass
