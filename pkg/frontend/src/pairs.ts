// Pair placement state machine: first click sets the handle, second the
// target; undo removes the most recent incomplete or complete pair.

import type { Pair, Point } from './api.js';

export type DraftState = 'placing-handle' | 'placing-target';

export class PairPlacement {
  pairs: Pair[] = [];
  pending: Point | null = null;

  get state(): DraftState {
    return this.pending === null ? 'placing-handle' : 'placing-target';
  }

  get completeCount(): number {
    return this.pairs.length;
  }

  click(point: Point): 'handle-placed' | 'pair-completed' {
    if (this.pending === null) {
      this.pending = point;
      return 'handle-placed';
    }
    this.pairs.push({ handle: this.pending, target: point });
    this.pending = null;
    return 'pair-completed';
  }

  undo(): boolean {
    if (this.pending !== null) {
      this.pending = null;
      return true;
    }
    if (this.pairs.length > 0) {
      this.pairs.pop();
      return true;
    }
    return false;
  }

  clear(): void {
    this.pairs = [];
    this.pending = null;
  }
}
