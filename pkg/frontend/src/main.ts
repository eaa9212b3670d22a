// Console entry point: login gate, tab switching, panel wiring.

import { ApiClient } from "./api.js";
import {
  initDetectorPanel,
  initHistoryPanel,
  initJogPanel,
  initRetrievalPanel,
  initScanPanel,
  initTubePanel,
} from "./panels.js";

const api = new ApiClient("");

function byId<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

function showTab(name: string): void {
  for (const section of document.querySelectorAll<HTMLElement>("[data-tab]")) {
    section.hidden = section.dataset.tab !== name;
  }
  for (const button of document.querySelectorAll<HTMLButtonElement>("[data-tab-button]")) {
    button.classList.toggle("active", button.dataset.tabButton === name);
  }
}

async function boot(): Promise<void> {
  const loginForm = byId<HTMLFormElement>("login-form");
  const loginError = byId<HTMLSpanElement>("login-error");

  loginForm.onsubmit = async (event) => {
    event.preventDefault();
    loginError.textContent = "";
    const user = byId<HTMLInputElement>("login-user").value;
    const password = byId<HTMLInputElement>("login-password").value;
    try {
      const session = await api.login(user, password);
      byId<HTMLElement>("login-page").hidden = true;
      byId<HTMLElement>("console-page").hidden = false;
      byId<HTMLSpanElement>("session-user").textContent =
        `${session.role}: ${user}`;
      await start();
    } catch (err: any) {
      loginError.textContent = err?.message ?? String(err);
    }
  };

  for (const button of document.querySelectorAll<HTMLButtonElement>("[data-tab-button]")) {
    button.onclick = () => showTab(button.dataset.tabButton!);
  }
  showTab("control");
}

async function start(): Promise<void> {
  const config = await api.config();
  byId<HTMLInputElement>("scan-steps").value = String(config.scan_defaults.steps);
  byId<HTMLInputElement>("scan-avg").value =
    String(config.scan_defaults.frames_to_average);
  byId<HTMLInputElement>("scan-exposure").value =
    String(config.scan_defaults.exposure_s);
  byId<HTMLSelectElement>("scan-mode").value = config.scan_defaults.mode;

  initJogPanel(api, config.stages);
  initTubePanel(api);
  initDetectorPanel(api);
  initScanPanel(api);
  initRetrievalPanel(api);
  initHistoryPanel(api);

  byId<HTMLButtonElement>("logout").onclick = async () => {
    await api.logout().catch(() => undefined);
    location.reload();
  };
}

void boot();
