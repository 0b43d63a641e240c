# Training loops
