"use strict";
/*__CONFIG__*/
(function () {
  const words = CONFIG.buffer_bytes >>> 2;
  const stride = CONFIG.line_bytes >>> 2;
  const lines = Math.floor(words / stride);
  const buf = new Uint32Array(words);

  // Random chain over cache lines, one element per line.
  let state = (CONFIG.seed >>> 0) || 1;
  function next() {
    state ^= state << 13;
    state >>>= 0;
    state ^= state >>> 17;
    state ^= state << 5;
    state >>>= 0;
    return state;
  }
  const order = new Uint32Array(lines);
  for (let i = 0; i < lines; i++) order[i] = i;
  for (let i = lines - 1; i > 0; i--) {
    const j = next() % (i + 1);
    const t = order[i];
    order[i] = order[j];
    order[j] = t;
  }
  for (let i = 0; i < lines; i++) {
    buf[order[i] * stride] = order[(i + 1) % lines] * stride;
  }
  let sink = 0;
  function sweep() {
    let idx = order[0] * stride;
    for (let i = 0; i < lines; i++) idx = buf[idx];
    sink ^= idx;
  }
  function yieldTask() {
    return new Promise((resolve) => {
      const c = new MessageChannel();
      c.port1.onmessage = resolve;
      c.port2.postMessage(0);
    });
  }

  async function round(url) {
    let fired = false;
    const img = new Image();
    img.onerror = () => { fired = true; };
    img.onload = () => { fired = true; };
    img.src = url;
    let count = 0;
    while (!fired && count < CONFIG.max_iterations) {
      sweep();
      count++;
      await yieldTask();
    }
    return fired ? count : null;
  }

  (async function () {
    const samples = [];
    for (const url of CONFIG.urls) {
      samples.push(await round(url));
    }
    self.__cachegram = { samples: samples, sink: sink };
  })();
})();
