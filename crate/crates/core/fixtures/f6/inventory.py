class Item:
    def __init__(self, name, price):
        self.name = name
        self.price = price

    def __repr__(self):
        return "Item(%r, %r)" % (self.name, self.price)


class Shelf:
    def __init__(self, label):
        self.label = label
        self.items = {}

    def __repr__(self):
        return "Shelf(%r)" % (self.label,)

    def add(self, item):
        self.items[item.name] = item
        return len(self.items)


def stock():
    shelf = Shelf("A1")
    shelf.add(Item("pen", 3))
    shelf.add(Item("ink", 7))
    count = len(shelf.items)
    return shelf, count


if __name__ == "__main__":
    shelf, count = stock()
    print(shelf.label, count)
