"""Counter fixture: sums a range through a helper."""


def accumulate(n):
    total = 0
    for i in range(n):
        total += step(i)
    return total


def step(i):
    return i * 2


def main():
    result = accumulate(5)
    print("total", result)


if __name__ == "__main__":
    main()
