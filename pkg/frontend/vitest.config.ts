import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    testTimeout: 180_000,
    hookTimeout: 180_000,
    // the suite drives one shared live mission; keep it sequential
    pool: "forks",
    fileParallelism: false,
    maxWorkers: 1,
  },
});
