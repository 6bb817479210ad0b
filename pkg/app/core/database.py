import os

from dotenv import load_dotenv
from sqlalchemy.pool import StaticPool
from sqlmodel import Session, SQLModel, create_engine

from app.core.logger import logger

load_dotenv()

# 数据库连接串 (run 登记表)，默认本地 SQLite 文件
DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///./dcrl_runs.db")


def make_engine(url: str = DATABASE_URL):
    if not url.startswith("sqlite"):
        return create_engine(url, echo=False)
    # SQLite 默认不允许跨线程使用同一连接 (FastAPI 的同步路由跑在线程池里)
    kwargs = {"connect_args": {"check_same_thread": False}}
    if url in ("sqlite://", "sqlite:///:memory:"):
        kwargs["poolclass"] = StaticPool
    return create_engine(url, echo=False, **kwargs)


engine = make_engine(DATABASE_URL)


def init_db(db_engine=None):
    from app.models import tables  # noqa: F401  注册表结构

    # 1. 创建表结构 (已存在则跳过)
    SQLModel.metadata.create_all(db_engine or engine)
    logger.info("✅ [DB] run 登记表就绪")


def get_session():
    with Session(engine) as session:
        yield session
