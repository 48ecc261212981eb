from app.client import Client


def run():
    client = Client({"retries": 5})
    return client.connect()


if __name__ == "__main__":
    print(run())
