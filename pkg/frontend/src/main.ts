/** CLI entry: serve a study bundle and record rater responses. */

import { createStudyServer } from "./server.js";

function argValue(flag: string, fallback?: string): string {
  const idx = process.argv.indexOf(flag);
  if (idx >= 0 && idx + 1 < process.argv.length) return process.argv[idx + 1];
  if (fallback !== undefined) return fallback;
  console.error(`usage: node dist/main.js --bundle <bundle.json> [--log responses.jsonl] [--port 8000]`);
  process.exit(2);
}

const bundlePath = argValue("--bundle");
const logPath = argValue("--log", "responses.jsonl");
const port = Number(argValue("--port", "8000"));

const server = createStudyServer({ bundlePath, logPath });
server.listen(port, () => {
  const address = server.address();
  const shown = typeof address === "object" && address ? address.port : port;
  console.log(`study server listening on http://localhost:${shown}`);
  console.log(`bundle: ${bundlePath}`);
  console.log(`response log: ${logPath}`);
});
