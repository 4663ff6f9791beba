import { PanelClient } from "./api.js";
import { Poller } from "./poller.js";
import { renderPanel } from "./render.js";
import { PanelViewModel } from "./viewmodel.js";

function endpoint(): string {
  const param = new URLSearchParams(location.search).get("endpoint");
  if (param) return param;
  return `${location.protocol}//${location.hostname}:7070`;
}

const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");

const client = new PanelClient({ baseUrl: endpoint() });
const vm = new PanelViewModel(client, {
  onChange: () => {
    root.innerHTML = renderPanel(vm);
  },
});
const poller = new Poller(client, vm);

// port buttons re-render constantly and the toolbar is static HTML;
// one delegated listener on the document covers both
document.addEventListener("click", (ev) => {
  const target = ev.target as HTMLElement;
  const portId = target.dataset.port;
  if (portId) {
    void vm.togglePort(portId, target.dataset.enable === "true");
    return;
  }
  switch (target.dataset.action) {
    case "rebalance":
      void vm.rebalance();
      break;
    case "fault": {
      const component = input("fault-component").value.trim();
      const action = select("fault-action").value;
      if (component) void vm.injectFault(component, action);
      break;
    }
    case "put": {
      const key = input("object-key").value.trim();
      if (key) void vm.putTestObject(key, input("object-value").value);
      break;
    }
    case "get": {
      const key = input("object-key").value.trim();
      if (key) void vm.getTestObject(key);
      break;
    }
  }
});

function input(id: string): HTMLInputElement {
  return document.getElementById(id) as HTMLInputElement;
}

function select(id: string): HTMLSelectElement {
  return document.getElementById(id) as HTMLSelectElement;
}

// re-render on a slow tick so the stale badge can appear without traffic
setInterval(() => {
  root.innerHTML = renderPanel(vm);
}, 1000);

void poller.start();
