# fedsim services: vectors, models, data, clients, server optimizers, quantization, aggregation, harness
