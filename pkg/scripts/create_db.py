# scripts/create_db.py
import sys
from pathlib import Path

# プロジェクトルートを import パスに入れる
ROOT = Path(__file__).resolve().parents[1]
sys.path.append(str(ROOT))

from app.db.session import configure_engine


def main():
    engine = configure_engine(create_tables=True)
    print(f"DB tables created: {engine.url.render_as_string(hide_password=True)}")


if __name__ == "__main__":
    main()
