from faker_lite import Provider


def make_deadline():
    provider = Provider()
    return provider.date_time(end_datetime="-1w", tzinfo="UTC")


if __name__ == "__main__":
    print("deadline", make_deadline())
