import { ViewerApp } from "./viewer.js";

function param(name: string, fallback: string): string {
  return new URLSearchParams(window.location.search).get(name) ?? fallback;
}

window.addEventListener("DOMContentLoaded", () => {
  const extent = param("extent", "64,64,64").split(",").map(Number);
  const app = new ViewerApp({
    serverUrl: param("server", "ws://127.0.0.1:8765"),
    volumeExtent: [extent[0], extent[1], extent[2]],
    channels: Number(param("channels", "1")),
    canvas: document.getElementById("view") as HTMLCanvasElement,
    statusBar: document.getElementById("status") as HTMLElement,
    controlsRoot: document.getElementById("controls") as HTMLElement,
  });
  app.connect();
});
