"""Reserved vocabulary ids shared by the corpus and the encoders."""

PAD, UNK, BLANK = 0, 1, 2
PAD_TOKEN, UNK_TOKEN, BLANK_TOKEN = "<pad>", "<unk>", "<blank>"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, BLANK_TOKEN)
