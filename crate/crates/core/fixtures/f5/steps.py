def square(x):
    y = x * x
    return y


def inc(x):
    z = x + 1
    return z


def compute(a):
    b = square(a)  # call
    c = inc(b)  # call
    d = b + c
    return d


def run():
    total = 0
    for k in range(3):
        total = total + compute(k)  # call
    return total


result = run()  # call
print("result", result)
