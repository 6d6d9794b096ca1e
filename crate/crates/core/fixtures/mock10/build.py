"""Regenerates the mock10 corpus: images, vqa.jsonl and annotator fixtures.

Request keys are sha256 of the compact, key-sorted JSON request.
"""
import hashlib
import json
from pathlib import Path

from PIL import Image, ImageDraw

HERE = Path(__file__).parent


def key(req):
    text = json.dumps(req, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(text.encode()).hexdigest()


def ground(image, phrase, boxes):
    req = {"image": image, "kind": "ground", "phrase": " ".join(phrase.split()).lower()}
    resp = {"boxes": [dict(zip(("x0", "y0", "x1", "y1", "score"), b)) for b in boxes]}
    return {"request_key": key(req), "request": req, "response": resp}


def ocr(image, region, items):
    req = {"image": image, "kind": "ocr", "region": region}
    resp = {"items": [{"text": t, "box": b} for t, b in items]}
    return {"request_key": key(req), "request": req, "response": resp}


def complete(question, text):
    req = {"kind": "complete", "question": question.strip()}
    return {"request_key": key(req), "request": req, "response": {"text": text}}


QUESTIONS = [
    ("q01", "sign.png", "What is written on the sign?", "KINGSGATE", "textvqa"),
    ("q02", "bottle.png", "What brand is on the bottle label?", "ACME", "textvqa"),
    ("q03", "street.png", "How many cars are in the street?", "3", "tallyvqa"),
    ("q04", "prices.png", "What is the total price of the two items?", "12", "stvqa"),
    ("q05", "hours.png", "What time does the store open?", "9am", "textvqa"),
    ("q06", "boat.png", "What is the name of the boat?", "SEA BREEZE", "textvqa"),
    ("q07", "tower.png", "How tall is the tower in meters?", "50", "textvqa"),
    ("q08", "gate.png", "Which gate does the walkway lead to?", "B12", "stvqa"),
    ("q09", "coin.png", "What year is on the coin?", "1998", "textvqa"),
    ("q10", "parcel.png", "What does the small sticker say?", "FRAGILE", "textvqa"),
]

COMPLETIONS = {
    "q01": "Step 1: Locate the sign in the image with GROUNDING(the sign)->bbx_1.\n"
    "Step 2: Read the text on it with OCR(bbx_1)->txt_1.\n"
    "Answer: KINGSGATE",
    "q02": "Step 1: Find the label on the bottle using GROUNDING(the bottle label)->bbx_1.\n"
    "Step 2: The text is small, so zoom in with CROP_AND_ZOOMIN(bbx_1, 2)->img_1.\n"
    "Step 3: Read the brand from the zoomed image with OCR(img_1)->txt_1.\n"
    "Answer: ACME",
    "q03": "Step 1: Cars are parked along both sides of the street.\n"
    "Step 2: Count them with COUNTING(cars)->num_1.\n"
    "Answer: 3",
    "q04": "Step 1: Find the first price tag with GROUNDING(the first price tag)->bbx_1.\n"
    "Step 2: Read it with OCR(bbx_1)->txt_1.\n"
    "Step 3: Find the second price tag with GROUNDING(the second price tag)->bbx_2.\n"
    "Step 4: Read it with OCR(bbx_2)->txt_2.\n"
    "Step 5: Add the two prices with CALCULATE(txt_1+txt_2)->num_1.\n"
    "Answer: 12",
    "q05": "Step 1: Locate the opening hours with GROUNDING(the opening hours)->bbx_1.\n"
    "Step 2: Read them with OCR(bbx_1)->txt_1.\n"
    "Answer: 9am",
    "q06": "Step 1: Find the name painted on the hull with GROUNDING(the boat name)->bbx_1.\n"
    "Step 2: Read it with OCR(bbx_1)->txt_1.\n"
    "Answer: SEA BREEZE",
    "q07": "Step 1: Measure the tower against the reference scale with MEASURE(the tower)->num_1.\n"
    "Answer: 50",
    "q08": "Step 1: Follow the walkway by drawing LINE((100,500),(900,500))->img_1 along it.\n"
    "Step 2: Read the gate sign where the line ends with OCR(img_1)->txt_1.\n"
    "Answer: B12",
    "q09": "Step 1: Locate the coin with GROUNDING(the coin)->bbx_1.\n"
    "Step 2: Zoom in on it with CROP_AND_ZOOMIN(bbx_1)->img_1.\n"
    "Step 3: Read the year with OCR(img_1)->txt_1.\n"
    "Answer: 1998",
    "q10": "Step 1: Find the sticker with GROUNDING(the small sticker)->bbx_1.\n"
    "Step 2: Zoom in with CROP_AND_ZOOMIN(bbx_1, 4)->img_1.\n"
    "Step 3: Read it with OCR(img_1)->txt_1.\n"
    "Answer: FRAGILE",
}

VISUAL = [
    # q01: two candidate signs, only the second reads the golden answer
    ground("sign.png", "the sign", [(100, 100, 400, 300, 0.85), (500, 120, 900, 360, 0.92)]),
    ocr("sign.png", [500, 120, 900, 360], [("KINGSGATE", [500, 120, 900, 360])]),
    ocr("sign.png", [100, 100, 400, 300], [("KINGS GATE", [100, 100, 400, 300])]),
    # q02
    ground("bottle.png", "the bottle label", [(350, 400, 650, 700, 0.9)]),
    ocr("bottle.png#crop(350,400,650,700)x2", None, [("ACME", [0, 0, 999, 999])]),
    # q03: boxes 1 and 2 overlap with IoU 0.935; the 0.1 box is below threshold
    ground(
        "street.png",
        "cars",
        [
            (100, 400, 250, 600, 0.9),
            (105, 400, 255, 600, 0.8),
            (400, 420, 550, 620, 0.88),
            (700, 410, 850, 610, 0.75),
            (0, 0, 50, 50, 0.1),
        ],
    ),
    # q04
    ground("prices.png", "the first price tag", [(100, 200, 300, 400, 0.9)]),
    ground("prices.png", "the second price tag", [(600, 200, 800, 400, 0.9)]),
    ocr("prices.png", [100, 200, 300, 400], [("$7", [120, 220, 280, 380])]),
    ocr("prices.png", [600, 200, 800, 400], [("$5", [620, 220, 780, 380])]),
    # q05: reads a different time than the golden answer
    ground("hours.png", "the opening hours", [(200, 300, 800, 500, 0.95)]),
    ocr("hours.png", [200, 300, 800, 500], [("10AM", [200, 300, 800, 500])]),
    # q06: no grounding fixture, so the boat name is never found
    # q07: MEASURE has no executor
    # q08
    ocr("gate.png#line(100,500;900,500)", None, [("B12", [850, 400, 990, 600])]),
    # q09
    ground("coin.png", "the coin", [(300, 300, 600, 600, 0.97)]),
    ocr("coin.png#crop(300,300,600,600)xauto", None, [("1998.", [100, 400, 900, 600])]),
    # q10: zero-width box, the crop is degenerate
    ground("parcel.png", "the small sticker", [(500, 500, 500, 520, 0.8)]),
]

COLORS = {
    "sign.png": (40, 90, 160),
    "bottle.png": (150, 60, 40),
    "street.png": (90, 90, 90),
    "prices.png": (230, 220, 200),
    "hours.png": (20, 120, 60),
    "boat.png": (30, 60, 140),
    "tower.png": (170, 170, 190),
    "gate.png": (200, 180, 60),
    "coin.png": (120, 100, 40),
    "parcel.png": (160, 120, 80),
}


def write_jsonl(path, rows):
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


def main():
    for i, (name, color) in enumerate(COLORS.items()):
        img = Image.new("RGB", (200, 150), color)
        d = ImageDraw.Draw(img)
        for k in range(6):
            x = (17 * (i + 1) + 31 * k) % 180
            y = (23 * (i + 2) + 19 * k) % 130
            d.rectangle([x, y, x + 15, y + 12], fill=((color[0] + 80 * k) % 256, (color[1] + 50) % 256, (color[2] + 30 * k) % 256))
        img.save(HERE / "images" / name)
    write_jsonl(
        HERE / "vqa.jsonl",
        [{"id": i, "image": img, "question": q, "answer": a, "source": s} for i, img, q, a, s in QUESTIONS],
    )
    write_jsonl(HERE / "llm.jsonl", [complete(q, COMPLETIONS[i]) for i, _, q, _, _ in QUESTIONS])
    write_jsonl(HERE / "visual.jsonl", VISUAL)


if __name__ == "__main__":
    main()
