class Cart:
    def __init__(self):
        self.lines = []

    def __repr__(self):
        return "Cart(%d lines)" % len(self.lines)

    def add(self, sku, qty, unit):
        self.lines.append((sku, qty, unit))

    def total(self):
        amount = 0
        for _, qty, unit in self.lines:
            amount += qty * unit
        if amount > 100:
            amount = amount * 0.9
        return round(amount, 2)
