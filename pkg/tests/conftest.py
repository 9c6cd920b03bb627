pytest_plugins = ["safn.testing"]
