# Networks: structural UNet, conditioning, refiner
