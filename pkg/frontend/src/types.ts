/** Wire types of the mission runner's operator API. */

export interface RobotStatus {
  index: number;
  mode: "START" | "EXPLORE" | "STOP" | "MOVEBASE" | "ESTOP";
  pose: [number, number, number];
  path_length: number;
  turn_queue: string[];
  time_limit: number;
  elapsed: number;
}

export interface MissionState {
  t: number;
  finished: boolean;
  exit_code: number;
  base_messages: number;
  robots: RobotStatus[];
}

export interface ArtifactEntry {
  hash: string;
  robot: number;
  class: string;
  confidence: number;
  position: [number, number] | null;
  detections: number;
  outlier: boolean;
  timestamp: number;
  verdict: "pending" | "approved" | "rejected";
}

export interface ScoringLine {
  class: string;
  position: [number, number] | null;
  robot: number;
  confidence: number;
}

export interface MapView {
  graphs: Record<
    string,
    { nodes: Record<string, [number, number, number]>; edges: [number, number][] }
  >;
  points: [number, number][];
}

export interface Command {
  robot: number;
  command: string;
  value?: unknown;
}
