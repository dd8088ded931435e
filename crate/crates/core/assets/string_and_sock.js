"use strict";
/*__CONFIG__*/
(function () {
  // ASCII-only haystack: an emoji needle can never match.
  const alphabet = "abcdefghijklmnopqrstuvwxyz0123456789 ";
  const chunk = alphabet.repeat(Math.ceil(4096 / alphabet.length)).slice(0, 4096);
  const haystack = chunk.repeat(Math.ceil(CONFIG.string_chars / chunk.length)).slice(0, CONFIG.string_chars);

  let state = (CONFIG.seed >>> 0) || 1;
  function next() {
    state ^= state << 13;
    state >>>= 0;
    state ^= state >>> 17;
    state ^= state << 5;
    state >>>= 0;
    return state;
  }
  function freshNeedle() {
    let s = "";
    for (let i = 0; i < CONFIG.needle_len; i++) {
      s += String.fromCodePoint(0x1f600 + (next() % 80));
    }
    return s;
  }
  function yieldTask() {
    return new Promise((resolve) => {
      const c = new MessageChannel();
      c.port1.onmessage = resolve;
      c.port2.postMessage(0);
    });
  }

  const ws = new WebSocket(CONFIG.ws_url);
  let open = false;
  let misses = 0;
  ws.onclose = () => { open = false; };
  ws.onopen = async () => {
    open = true;
    let seq = 0;
    const frame = () => String(seq++ % 10000).padStart(4, "0");
    ws.send(frame());
    for (let p = 0; p < CONFIG.probes && open; p++) {
      for (let n = 0; n < CONFIG.decimation_n; n++) {
        if (haystack.indexOf(freshNeedle()) === -1) misses++;
      }
      if (!open || ws.readyState !== WebSocket.OPEN) break;
      ws.send(frame());
      if (p % 64 === 63) await yieldTask();
    }
    self.__cachegram = { probes: seq - 1, misses: misses };
    if (open) ws.close(1000);
  };
})();
