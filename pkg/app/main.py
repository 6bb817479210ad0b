import uvicorn
from contextlib import asynccontextmanager
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

# 1. 导入核心模块
from app.core.database import init_db
from app.core.logger import logger
# 2. 导入各个业务模块的路由
from app.api.endpoints import (
    runs,       # run 列表 / 摘要 / 指标
    analysis,   # 标签准确率曲线
    reports,    # CSV 导出
)


# =================================================================
# 🔄 生命周期管理器 (Lifespan)
# 作用：启动时确保 run 登记表存在
# =================================================================
@asynccontextmanager
async def lifespan(app: FastAPI):
    # --- 🟢 启动阶段 ---
    init_db()
    logger.info("✅ 结果浏览服务就绪")

    yield

    # --- 🔴 关闭阶段 ---
    logger.info("🛑 [系统关闭] 结果浏览服务退出")


# =================================================================
# 🏗️ 初始化 FastAPI 应用
# =================================================================
app = FastAPI(
    title="DualConsensus lab",
    description="只读浏览训练 run 的指标、标签准确率曲线与 CSV 导出",
    version="1.0.0",
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# =================================================================
# 🛣️ 注册 HTTP 路由 (只读)
# =================================================================
app.include_router(runs.router, prefix="/runs", tags=["1. 训练 run"])
app.include_router(analysis.router, prefix="/analysis", tags=["2. 分析"])
app.include_router(reports.router, prefix="/reports", tags=["3. 报表导出"])


# =================================================================
# ▶️ 程序入口
# =================================================================
if __name__ == "__main__":
    uvicorn.run("app.main:app", host="0.0.0.0", port=8088, reload=True)
