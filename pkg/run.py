import uvicorn

from app.core.config import load_settings

if __name__ == "__main__":
    # host / port 从 config/settings.json 的 server 节读取
    server = load_settings().get("server", {})
    uvicorn.run(
        "app.main:app",
        host=server.get("host", "0.0.0.0"),
        port=int(server.get("port", 8088)),
        reload=True,  # 开发模式下开启热重载
    )
