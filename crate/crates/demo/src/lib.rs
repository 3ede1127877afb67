// placeholder until the demo is built
