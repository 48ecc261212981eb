def add(a, b):
    return a - b


def scale(values, factor):
    return [v * factor for v in values]
