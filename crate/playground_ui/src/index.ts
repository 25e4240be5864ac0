export * from "./api.js";
export * from "./compose.js";
export * from "./session.js";
